"""Grid forward-backward for scalar chains with Gaussian transitions.

The transition density is evaluated between grid points and multiplied by
the spacing, turning the chain into a finite one.  With a fine enough grid
this gives the marginal law of ``x_k`` under endpoint and observation
constraints to within discretisation error, independently of any particle
method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class GridMarginal:
    grid: np.ndarray
    probabilities: np.ndarray  # mass per grid point, sums to one

    def cell_masses(self, edges: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(edges, self.grid, side="right") - 1
        ok = (idx >= 0) & (idx < edges.size - 1)
        return np.bincount(idx[ok], self.probabilities[ok], edges.size - 1)

    def mean(self) -> float:
        return float(np.sum(self.grid * self.probabilities))


def grid_marginal(
    mean: Callable[[np.ndarray], np.ndarray],
    var: float,
    horizon: int,
    start: float,
    end: float | None,
    observations: dict,
    time: int,
    lower: float = -14.0,
    upper: float = 14.0,
    spacing: float = 0.02,
) -> GridMarginal:
    """Marginal of ``x_time`` for ``x_t ~ N(mean(x_{t-1}), var)``.

    Parameters
    ----------
    mean : callable
        Transition mean as a function of the previous state.
    var : float
        Transition variance.
    start, end : float
        Fixed values of ``x_0`` and ``x_horizon`` (``end=None`` leaves it free);
        both are snapped to the nearest grid point.
    observations : dict
        ``t -> (value, variance)`` Gaussian observations of ``x_t``.
    """
    g = np.arange(lower, upper + spacing / 2, spacing)
    mu = mean(g)
    z = (g[None, :] - mu[:, None]) / np.sqrt(var)
    P = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi * var) * spacing  # P[i, j] = p(g_j | g_i)

    def like(t):
        if t not in observations:
            return None
        y, v = observations[t]
        return np.exp(-0.5 * (y - g) ** 2 / v)

    f = np.zeros(g.size)
    f[np.argmin(np.abs(g - start))] = 1.0
    for t in range(1, time + 1):
        f = f @ P
        lk = like(t)
        if lk is not None:
            f = f * lk
        f /= f.sum()
    b = np.ones(g.size)
    if end is not None:
        b = np.zeros(g.size)
        b[np.argmin(np.abs(g - end))] = 1.0
    elif like(horizon) is not None and horizon > time:
        b = like(horizon)
    for t in range(horizon - 1, time - 1, -1):
        b = P @ b
        lk = like(t)
        if lk is not None and t > time:
            b = b * lk
        b /= b.max()
    m = f * b
    return GridMarginal(g, m / m.sum())
