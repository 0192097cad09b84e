"""Weighted-ensemble primitives.

Weights live in log scale.  ``ParticleEnsemble.log_weights`` holds the
stored log-weights and ``log_weight_scale`` a shared offset, so that the
true log-weight of particle ``i`` is ``log_weight_scale + log_weights[i]``.
Only self-normalised quantities are ever formed, so the offset is carried
purely for bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from csmc.errors import DegenerateEnsembleError, ModelError

RESAMPLING_SCHEMES = ("multinomial", "stratified")


@dataclass(frozen=True)
class ParticleEnsemble:
    """``n`` weighted trajectories ``x_{0:t}`` sharing the current time ``t``.

    Attributes
    ----------
    paths : ndarray, shape (n, t + 1, d)
        ``paths[i]`` is trajectory ``i``.
    log_weights : ndarray, shape (n,)
        Stored log-weights (``-inf`` marks a killed particle).
    log_weight_scale : float
        Shared offset added to every stored log-weight.
    stats : ndarray, shape (n, k), optional
        Summary statistic ``S(x_{0:t})`` per particle.
    origin : ndarray, shape (n,), optional
        Index of the time-0 ancestor of each particle.
    """

    paths: np.ndarray
    log_weights: np.ndarray
    log_weight_scale: float = 0.0
    stats: np.ndarray | None = None
    origin: np.ndarray | None = None

    def __post_init__(self):
        if self.paths.ndim != 3:
            raise ValueError(f"paths must have shape (n, t+1, d), got {self.paths.shape}")
        if self.log_weights.shape != (self.paths.shape[0],):
            raise ValueError("one log-weight per trajectory is required")
        if np.any(np.isnan(self.log_weights)) or np.any(self.log_weights == np.inf):
            raise ModelError("log-weights must be finite or -inf")

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    @property
    def time(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def state_dim(self) -> int:
        return self.paths.shape[2]

    @property
    def current(self) -> np.ndarray:
        return self.paths[:, -1]

    @property
    def weights(self) -> np.ndarray:
        """Stored weights ``exp(log_weights)``."""
        return np.exp(self.log_weights)

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        top = np.max(lw)
        if top == -np.inf:
            raise DegenerateEnsembleError("all particle weights are zero")
        w = np.exp(lw - top)
        return w / w.sum()

    def alive(self) -> np.ndarray:
        return np.isfinite(self.log_weights)

    def select(self, idx: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.paths[idx],
            self.log_weights[idx],
            self.log_weight_scale,
            None if self.stats is None else self.stats[idx],
            None if self.origin is None else self.origin[idx],
        )


def log_ess(log_scores: np.ndarray) -> float:
    """Log of ``(sum b)^2 / sum b^2`` computed from log-scores."""
    log_scores = np.asarray(log_scores, dtype=float)
    if log_scores.size == 0 or np.max(log_scores) == -np.inf:
        raise DegenerateEnsembleError("all priority scores are zero")
    return float(2.0 * logsumexp(log_scores) - logsumexp(2.0 * log_scores))


def ess(scores) -> float:
    r"""Effective sample size of nonnegative priority scores.

    .. math:: \mathrm{ESS} = (\sum_i \beta_i)^2 / \sum_i \beta_i^2

    Raises
    ------
    DegenerateEnsembleError
        If every score is zero.
    """
    b = np.asarray(scores, dtype=float)
    if np.any(b < 0) or np.any(~np.isfinite(b)):
        raise ValueError("priority scores must be finite and nonnegative")
    if not np.any(b > 0):
        raise DegenerateEnsembleError("all priority scores are zero")
    # scale by the max to keep the squares representable
    b = b / b.max()
    return float(b.sum() ** 2 / np.sum(b * b))


def normalize_log_weights(ensemble: ParticleEnsemble) -> ParticleEnsemble:
    """Move the maximum stored log-weight into ``log_weight_scale``."""
    top = np.max(ensemble.log_weights)
    if top == -np.inf:
        raise DegenerateEnsembleError("all particle weights are zero")
    return replace(
        ensemble,
        log_weights=ensemble.log_weights - top,
        log_weight_scale=ensemble.log_weight_scale + float(top),
    )


def resample_indices(log_scores: np.ndarray, n: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` ancestor indices with probabilities proportional to ``exp(log_scores)``.

    The cumulative distribution is inverted with a strict inequality: the
    index for a uniform ``u`` is the first ``i`` with ``cdf[i] > u``, so a
    particle with zero score is never selected.
    """
    log_scores = np.asarray(log_scores, dtype=float)
    top = np.max(log_scores)
    if top == -np.inf:
        raise DegenerateEnsembleError("all priority scores are zero")
    p = np.exp(log_scores - top)
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    if scheme == "multinomial":
        u = rng.random(n)
    elif scheme == "stratified":
        u = (np.arange(n) + rng.random(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected one of {RESAMPLING_SCHEMES}")
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(cdf) - 1)


def resample(
    ensemble: ParticleEnsemble,
    log_scores: np.ndarray,
    scheme: str = "multinomial",
    rng: np.random.Generator | None = None,
) -> tuple[ParticleEnsemble, np.ndarray]:
    """Resample with priority scores and reweight copies by ``w / beta``.

    Parameters
    ----------
    ensemble : ParticleEnsemble
    log_scores : ndarray, shape (n,)
        ``log beta_i``; for the cSMC score this is
        ``log w_i + log p_hat(I_{t+1:t+} | x_{0:t}^{(i)})``.
    scheme : {"multinomial", "stratified"}
    rng : numpy Generator

    Returns
    -------
    (ParticleEnsemble, ndarray)
        The resampled ensemble and the ancestor index of each new particle.
    """
    log_scores = np.asarray(log_scores, dtype=float)
    if log_scores.shape != (ensemble.n,):
        raise ValueError("one priority score per particle is required")
    if rng is None:
        rng = np.random.default_rng()
    idx = resample_indices(log_scores, ensemble.n, scheme, rng)
    out = ParticleEnsemble(
        ensemble.paths[idx],
        ensemble.log_weights[idx] - log_scores[idx],
        ensemble.log_weight_scale,
        None if ensemble.stats is None else ensemble.stats[idx],
        None if ensemble.origin is None else ensemble.origin[idx],
    )
    return out, idx


def _check_density(name: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise ModelError(f"{name} evaluated to NaN or +inf")
    return values


def incremental_weight(model, schedule, t: int, prefix, new_state: np.ndarray, proposal_log_density) -> np.ndarray:
    """Log incremental weight ``log p(x_t|.) + log p(I_t|x_t) - log q(x_t|.)``.

    ``prefix`` is ``None`` at ``t = 0``.  A zero constraint likelihood gives
    ``-inf`` (the particle is killed); a NaN or ``+inf`` model density
    raises :class:`ModelError`.
    """
    if t == 0:
        log_p = model.initial_logpdf(new_state)
    else:
        log_p = model.forward_logpdf(t, prefix, new_state)
    log_p = _check_density("forward log-density", log_p)
    log_i = _check_density("constraint log-likelihood", schedule.log_likelihood(t, new_state))
    log_q = _check_density("proposal log-density", proposal_log_density)
    with np.errstate(invalid="ignore"):
        out = log_p + log_i - log_q
    # a state outside the model support and the proposal gives -inf - -inf
    return np.where(np.isnan(out), -np.inf, out)


def self_normalized(ensemble: ParticleEnsemble, values: np.ndarray) -> float:
    w = ensemble.normalized_weights()
    return float(np.sum(w * values))
