"""Deterministic random streams.

Every draw in the library comes from a generator addressed by a key path,
e.g. ``("propagate", t, block)``.  The key path is folded into the
``spawn_key`` of a :class:`numpy.random.SeedSequence`, and the resulting
Philox (counter-based) generator depends only on ``(master seed, key path)``.
How work is split across threads therefore never changes the numbers drawn.

String key components are mapped to integers with CRC-32 so that key paths
are stable across processes and Python versions.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

KeyPart = Union[int, str]

_U64 = (1 << 64) - 1


def _as_int(part: KeyPart) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            raise ValueError(f"stream key components must be >= 0, got {value}")
        return value
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key component {part!r}")


class Streams:
    """A master seed plus a key prefix.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit master seed.
    key : tuple
        Key prefix inherited by every generator made from this object.
    """

    __slots__ = ("seed", "key")

    def __init__(self, seed: int, key: tuple[KeyPart, ...] = ()):
        seed = int(seed)
        if seed < 0 or seed > _U64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.key = tuple(_as_int(k) for k in key)

    def child(self, *key: KeyPart) -> "Streams":
        return Streams(self.seed, self.key + tuple(_as_int(k) for k in key))

    def generator(self, *key: KeyPart) -> np.random.Generator:
        full = self.key + tuple(_as_int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=full)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, key={self.key})"


def as_streams(rng: "Streams | int | None") -> Streams:
    """Coerce a seed or ``None`` into a :class:`Streams`."""
    if isinstance(rng, Streams):
        return rng
    if rng is None:
        return Streams(np.random.SeedSequence().entropy & _U64)
    return Streams(int(rng))
