"""Priority scores from pilots run backward in time (Markov systems only).

Pilots start at a strong-constraint time ``T_k`` from a terminal proposal
and step backward with a reverse kernel ``r(x_t | x_{t+1})``.  Their weights

    w_t = w_{t+1} * p(x_{t+1} | x_t) * p(I_{t+1} | x_{t+1}) / r(x_t | x_{t+1})

binned by ``x_t`` and divided by ``m * |cell|`` estimate
``p(I_{t+1:T_k} | x_t)`` directly on the density scale.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from csmc.errors import ConfigurationError, EstimatorDegenerateError, ModelError
from csmc.model import (
    Constraint,
    ConstraintSchedule,
    DynamicModel,
    FixedPoint,
    Observation,
    Prefix,
    Subset,
    gaussian_logpdf,
)
from csmc.oracles.truncnorm import truncated_normal, truncated_normal_logpdf
from csmc.particles import log_ess, resample_indices
from csmc.priority.base import PriorityEstimatorSet, equal_width_partition, fixed_width_partition, weighted_histogram
from csmc.streams import Streams, as_streams

# ---------------------------------------------------------------------------
# Terminal proposals r(x_{T_k})
# ---------------------------------------------------------------------------


class TerminalProposal(ABC):
    @abstractmethod
    def sample(self, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, log_r)`` with ``x`` of shape ``(m, d)``."""


@dataclass(frozen=True)
class PointMassTerminal(TerminalProposal):
    """All pilots start at ``point``; the starting weight is 1."""

    point: np.ndarray

    def sample(self, m, rng):
        point = np.atleast_1d(np.asarray(self.point, dtype=float))
        return np.tile(point, (m, 1)), np.zeros(m)


@dataclass(frozen=True)
class GaussianTerminal(TerminalProposal):
    mean: float
    var: float

    def sample(self, m, rng):
        x = self.mean + np.sqrt(self.var) * rng.standard_normal(m)
        return x[:, None], gaussian_logpdf(x, self.mean, self.var)


@dataclass(frozen=True)
class TruncatedGaussianTerminal(TerminalProposal):
    mean: float
    var: float
    upper: float

    def sample(self, m, rng):
        x = truncated_normal(self.mean, self.var, self.upper, rng, size=m)
        return x[:, None], truncated_normal_logpdf(x, self.mean, self.var, self.upper)


def default_terminal(constraint: Constraint, diffuse: tuple[float, float] | None = None) -> TerminalProposal:
    """Terminal proposal matched to the kind of strong constraint.

    ``diffuse = (mean, var)`` is a broad Gaussian used for subset
    constraints, which is truncated to the subset.
    """
    if isinstance(constraint, FixedPoint):
        return PointMassTerminal(constraint.point)
    if isinstance(constraint, Observation):
        if constraint.variance is None:
            raise ConfigurationError("observation terminal proposal needs a Gaussian observation variance")
        return GaussianTerminal(float(constraint.value), constraint.variance)
    if isinstance(constraint, Subset):
        if constraint.upper is None or diffuse is None:
            raise ConfigurationError("subset terminal proposal needs an upper bound and a diffuse (mean, var)")
        return TruncatedGaussianTerminal(diffuse[0], diffuse[1], constraint.upper)
    raise ConfigurationError(f"no default terminal proposal for {type(constraint).__name__}")


# ---------------------------------------------------------------------------
# Reverse kernels r(x_t | x_{t+1})
# ---------------------------------------------------------------------------


class BackwardKernel(ABC):
    @abstractmethod
    def sample(self, t: int, x_next: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``x_t`` given ``x_{t+1}``; return ``(x_t, log r)``."""


@dataclass
class ReflectedDriftKernel(BackwardKernel):
    """``N(2 x_{t+1} - m(x_{t+1}), v(x_{t+1}))`` from the forward moments ``(m, v)``.

    For an Euler scheme ``m(x) = x + delta * mu(x)``, so the reverse step
    is ``x_{t+1} - delta * mu(x_{t+1})``: the forward drift negated.
    """

    model: DynamicModel

    def sample(self, t, x_next, rng):
        mean, var = self.model.forward_moments(t + 1, Prefix(x_next))
        mean = 2.0 * x_next - mean
        x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return x, np.sum(gaussian_logpdf(x, mean, var), axis=1)


@dataclass
class ForwardStepKernel(BackwardKernel):
    """``N(m(x_{t+1}), v(x_{t+1}))``: the forward kernel applied in reverse time.

    For a reversible diffusion this approximates the time reversal, so pilot
    weights stay close to a function of the current state.
    """

    model: DynamicModel

    def sample(self, t, x_next, rng):
        mean, var = self.model.forward_moments(t + 1, Prefix(x_next))
        x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return x, np.sum(gaussian_logpdf(x, mean, var), axis=1)


@dataclass
class IncrementKernel(BackwardKernel):
    """``x_t = x_{t+1} + e`` with ``e`` drawn from an increment law."""

    draw: Callable[[int, np.random.Generator], np.ndarray]
    log_density: Callable[[np.ndarray], np.ndarray]

    def sample(self, t, x_next, rng):
        e = np.asarray(self.draw(x_next.shape[0], rng), dtype=float).reshape(x_next.shape)
        return x_next + e, np.sum(self.log_density(e), axis=1)


# ---------------------------------------------------------------------------
# Estimator construction
# ---------------------------------------------------------------------------


def _partition_fn(partition, cells):
    if callable(partition):
        return partition
    if partition is None or partition == "auto":
        return lambda t, values: equal_width_partition(values, cells)
    width = float(partition)
    return lambda t, values: fixed_width_partition(values, width)


def strong_segments(schedule: ConstraintSchedule) -> list[tuple[int, int, int]]:
    """``(first_t, lo, hi)`` for each segment ending in a strong time.

    ``first_t`` is the earliest time that needs an estimate: ``lo + 1`` when
    ``lo`` is itself strong, ``lo`` otherwise (the start of the horizon).
    """
    out = []
    for lo, hi in schedule.segments():
        if not schedule[hi].strong or hi == lo:
            continue
        first = lo + 1 if schedule[lo].strong else lo
        out.append((first, lo, hi))
    return out


@dataclass
class BackwardPilots:
    """Pilot positions and log-weights per time, kept for diagnostics."""

    positions: dict
    log_weights: dict


def backward_pilot_smoothing(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    m: int,
    rng: Streams | int | None = None,
    kernel: BackwardKernel | None = None,
    terminal: Callable[[int], TerminalProposal] | dict | None = None,
    partition="auto",
    cells: int = 50,
    diffuse: tuple[float, float] | None = None,
    keep_pilots: bool = False,
    resample_below: float | None = None,
    outside: str = "fallback",
) -> PriorityEstimatorSet:
    """Histogram estimators of ``p(I_{t+1:t+} | x_t)`` from backward pilots.

    Parameters
    ----------
    model : DynamicModel
        Must be Markov.
    schedule : ConstraintSchedule
    m : int
        Pilots per segment.
    rng : Streams or int
    kernel : BackwardKernel, optional
        Defaults to :class:`ReflectedDriftKernel`.
    terminal : dict or callable, optional
        Terminal proposal per strong time; defaults from
        :func:`default_terminal`.
    partition : "auto", float or callable
        ``"auto"`` uses ``cells`` equal-width cells over the 1st-99th
        percentile of pilot positions; a float is a fixed cell width;
        a callable ``(t, positions) -> edges`` is used as is.
    resample_below : float, optional
        If given, pilots are resampled multinomially whenever their ESS falls
        below ``resample_below * m``; every copy then carries the mean weight,
        so the histogram estimate stays unbiased.  Off by default.
    outside : {"fallback", "nearest"}
        Value beyond the pilot range: zero, or the nearest edge cell.
    """
    if not model.markov:
        raise ConfigurationError("backward pilots require a Markov model")
    if m < 1:
        raise ValueError("need at least one pilot")
    streams = as_streams(rng).child("backward-pilots")
    kernel = kernel or ReflectedDriftKernel(model)
    make_edges = _partition_fn(partition, cells)
    per_time = {}
    kept = BackwardPilots({}, {})
    for k, (first, lo, hi) in enumerate(strong_segments(schedule)):
        if isinstance(terminal, dict):
            term = terminal[hi]
        elif callable(terminal):
            term = terminal(hi)
        else:
            term = default_terminal(schedule[hi], diffuse)
        x_next, log_r = term.sample(m, streams.generator(k, "terminal"))
        if np.any(~np.isfinite(log_r)):
            raise ModelError(f"terminal proposal at t={hi} has zero density at a sampled point")
        logw = -log_r
        for t in range(hi - 1, first - 1, -1):
            x, log_rt = kernel.sample(t, x_next, streams.generator(k, t))
            inc = model.forward_logpdf(t + 1, Prefix(x), x_next) + schedule.log_likelihood(t + 1, x_next) - log_rt
            if np.any(np.isnan(inc)) or np.any(inc == np.inf):
                raise ModelError(f"backward pilot weight is NaN or +inf at t={t}")
            logw = logw + inc
            alive = np.isfinite(logw)
            if not np.any(alive):
                raise EstimatorDegenerateError((lo, hi), f"every backward pilot has zero weight at t={t}")
            coords = x if x.shape[1] > 1 else x[:, 0]
            ref = x[alive]
            edges = [make_edges(t, ref[:, a]) for a in range(x.shape[1])]
            per_time[t] = weighted_histogram(coords, logw, edges, normalizer="volume", total=m, empty="zero",
                                            outside=outside)
            if keep_pilots:
                kept.positions[t] = x.copy()
                kept.log_weights[t] = logw.copy()
            x_next = x
            if resample_below is not None and np.exp(log_ess(logw)) < resample_below * m:
                idx = resample_indices(logw, m, "multinomial", streams.generator(k, t, "resample"))
                x_next = x[idx]
                logw = np.full(m, logsumexp(logw) - np.log(m))
    info = {"m": m, "pilots": kept} if keep_pilots else {"m": m}
    return PriorityEstimatorSet(schedule, per_time, kind="backward-pilot", info=info)
