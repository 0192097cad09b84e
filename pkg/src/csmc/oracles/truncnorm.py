"""Upper-truncated normal sampling, ``x ~ N(mean, variance | x < upper)``.

Mild truncation (standardised bound ``alpha = (upper - mean) / sd > -2``)
uses inverse-CDF sampling.  Tail truncation uses the exponential
accept-reject sampler of Robert (1995) on the reflected variable
``-z > -alpha``, with the optimal exponential rate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

_TAIL = -2.0


def _standard_upper(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = np.empty_like(alpha)
    mild = alpha > _TAIL
    if np.any(mild):
        u = rng.random(int(mild.sum()))
        z[mild] = ndtri(u * ndtr(alpha[mild]))
    tail = ~mild
    if np.any(tail):
        a = -alpha[tail]
        lam = 0.5 * (a + np.sqrt(a * a + 4.0))
        out = np.empty_like(a)
        pending = np.arange(a.size)
        while pending.size:
            y = a[pending] + rng.exponential(size=pending.size) / lam[pending]
            accept = rng.random(pending.size) <= np.exp(-0.5 * (y - lam[pending]) ** 2)
            out[pending[accept]] = y[accept]
            pending = pending[~accept]
        z[tail] = -out
    return z


def truncated_normal(mean, variance, upper, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from ``N(mean, variance)`` conditioned on ``x < upper``.

    ``mean``, ``variance`` and ``upper`` broadcast against each other (and
    against ``size`` when given).  ``upper = inf`` gives an ordinary normal
    draw.
    """
    mean, variance, upper = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(variance, float), np.asarray(upper, float)
    )
    if size is not None:
        mean, variance, upper = (np.broadcast_to(a, size) for a in (mean, variance, upper))
    if np.any(variance <= 0):
        raise ValueError("truncated normal requires a positive variance")
    sd = np.sqrt(variance)
    alpha = np.asarray((upper - mean) / sd, dtype=float)
    shape = alpha.shape
    z = _standard_upper(alpha.ravel().copy(), rng).reshape(shape)
    x = mean + sd * z
    # guard the bound against round-off at the edge
    return np.minimum(x, np.nextafter(upper, -np.inf))


def truncated_normal_logpdf(x, mean, variance, upper) -> np.ndarray:
    """Log-density of the upper-truncated normal; ``-inf`` for ``x >= upper``."""
    x, mean, variance, upper = np.broadcast_arrays(*(np.asarray(a, float) for a in (x, mean, variance, upper)))
    sd = np.sqrt(variance)
    alpha = (upper - mean) / sd
    z = (x - mean) / sd
    logp = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi) - np.log(sd) - log_ndtr(alpha)
    return np.where(x < upper, logp, -np.inf)


def truncated_normal_mean(mean, variance, upper) -> np.ndarray:
    """Closed-form mean ``mu - sigma * phi(alpha) / Phi(alpha)``."""
    sd = np.sqrt(variance)
    alpha = (np.asarray(upper, float) - mean) / sd
    mills = np.exp(-0.5 * alpha * alpha - 0.5 * np.log(2 * np.pi) - log_ndtr(alpha))
    return mean - sd * mills
