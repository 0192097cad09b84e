"""Parametric priority scores fitted by backward weighted least squares.

The proposal family is Gaussian in ``x_t`` with a linear coupling to
``x_{t-1}``::

    psi_t(x_t, x_{t-1}) = exp(a x_t^2 + b x_t + c x_t x_{t-1} + d x_{t-1}^2 + e x_{t-1}),  a < 0

so that ``q(x_t | x_{t-1}) = psi_t / chi_t = N(-(b + c x_{t-1}) / (2a), -1 / (2a))`` and

    log chi_t(x_{t-1}) = 0.5 log(pi / -a) - (b + c x_{t-1})^2 / (4a) + d x_{t-1}^2 + e x_{t-1}.

For each segment the fit is iterated: sample pilot trajectories from the
current proposals, then for ``t = T_k, ..., T_{k-1} + 1`` regress
``log[p(x_t | x_{t-1}) p(I_t | x_t) chi_{t+1}(x_t)]`` on ``gamma + log psi_t``
with the pilots' end-of-segment weights.  ``chi_{t+1}(x_t)`` is then the
priority estimate at ``t``.  Scalar states only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from csmc.errors import ConfigurationError, PeisError
from csmc.model import (
    BootstrapProposal,
    ConstraintSchedule,
    DynamicModel,
    FixedPoint,
    Prefix,
    Proposal,
    constraint_aware,
    gaussian_logpdf,
)
from csmc.particles import incremental_weight
from csmc.priority.backward import default_terminal, strong_segments
from csmc.priority.base import PriorityEstimatorSet
from csmc.streams import Streams, as_streams


@dataclass(frozen=True)
class GaussianPsi:
    """Coefficients ``(a, b, c, d, e)`` of ``log psi`` plus the regression intercept."""

    a: float
    b: float
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if not self.a < 0:
            raise ValueError(f"quadratic coefficient must be negative for integrability, got {self.a}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e])

    def log_chi(self, x_prev) -> np.ndarray:
        x = np.asarray(x_prev, dtype=float)
        lin = self.b + self.c * x
        return 0.5 * np.log(np.pi / -self.a) - lin * lin / (4.0 * self.a) + self.d * x * x + self.e * x

    def moments(self, x_prev) -> tuple[np.ndarray, float]:
        x = np.asarray(x_prev, dtype=float)
        return -(self.b + self.c * x) / (2.0 * self.a), -0.5 / self.a


@dataclass
class PeisProposal(Proposal):
    """Use the fitted Gaussian ``q(x_t | x_{t-1})`` where available, the model elsewhere."""

    model: DynamicModel
    params: dict

    def propose_initial(self, n, rng):
        x = self.model.sample_initial(n, rng)
        return x, self.model.initial_logpdf(x)

    def propose(self, t, prefix, rng):
        psi = self.params.get(t)
        if psi is None:
            x = self.model.sample_forward(t, prefix, rng)
            return x, self.model.forward_logpdf(t, prefix, x)
        mean, var = psi.moments(prefix.last[:, 0])
        x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return x[:, None], gaussian_logpdf(x, mean, var)

    def logpdf(self, t, prefix, x):
        psi = self.params.get(t)
        if t == 0:
            return self.model.initial_logpdf(x)
        if psi is None:
            return self.model.forward_logpdf(t, prefix, x)
        mean, var = psi.moments(prefix.last[:, 0])
        return gaussian_logpdf(x[:, 0], mean, var)


@dataclass
class PeisResult:
    params: dict
    estimators: PriorityEstimatorSet
    iterations: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)
    changes: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    model: DynamicModel | None = None
    schedule: ConstraintSchedule | None = None

    def log_chi(self, t: int, x_prev) -> np.ndarray:
        """``log chi_t(x_{t-1})`` up to an additive constant."""
        return _log_chi(self.model, self.schedule, self.params, t, np.asarray(x_prev, float))

    def proposal(self) -> Proposal:
        return constraint_aware(PeisProposal(self.model, self.params), self.model, self.schedule)


def _log_chi(model, schedule, params, t, x_prev):
    c = schedule[t]
    if isinstance(c, FixedPoint):
        point = np.tile(c.point, (x_prev.shape[0], 1))
        return model.forward_logpdf(t, Prefix(x_prev[:, None]), point)
    return params[t].log_chi(x_prev)


def _relative_change(old: GaussianPsi | None, new: GaussianPsi) -> float:
    if old is None:
        return np.inf
    return float(np.max(np.abs(new.theta - old.theta) / np.maximum(np.abs(old.theta), 1.0)))


def _fit(y, x_t, x_prev, weights, t, eps, flags) -> GaussianPsi:
    ok = np.isfinite(y) & (weights > 0)
    y, x_t, x_prev, w = y[ok], x_t[ok], x_prev[ok], weights[ok]
    coupled = np.ptp(x_prev) > 1e-12 * max(1.0, float(np.max(np.abs(x_prev)))) if x_prev.size else False
    cols = [np.ones_like(x_t), x_t * x_t, x_t]
    if coupled:
        cols += [x_t * x_prev, x_prev * x_prev, x_prev]
    X = np.column_stack(cols)
    if X.shape[0] < X.shape[1]:
        raise PeisError(f"t={t}: {X.shape[0]} usable pilots for {X.shape[1]} regression coefficients")
    sw = np.sqrt(w / w.sum())
    coef, _, rank, sv = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    if rank < X.shape[1]:
        raise PeisError(f"t={t}: singular regression design (rank {rank} of {X.shape[1]})")
    gamma, a, b = coef[:3]
    c, d, e = coef[3:] if coupled else (0.0, 0.0, 0.0)
    if not a < -eps:
        flags.append(f"t={t}: fitted quadratic coefficient {a:g} projected to {-eps:g}")
        a = -eps
    return GaussianPsi(float(a), float(b), float(c), float(d), float(e), float(gamma))


def _start_segment(model, schedule, proposal, lo, m, rng, diffuse):
    if lo == 0:
        x, logq = proposal.propose_initial(m, rng)
        return x, incremental_weight(model, schedule, 0, None, x, logq)
    term = default_terminal(schedule[lo], diffuse)
    x, log_r = term.sample(m, rng)
    return x, schedule.log_likelihood(lo, x) - log_r


def peis_optimize(
    model: DynamicModel,
    schedule: ConstraintSchedule,
    m: int,
    rng: Streams | int | None = None,
    max_iters: int = 20,
    tol: float = 1e-6,
    eps: float = 1e-8,
    initial_params: dict | None = None,
    diffuse: tuple[float, float] | None = None,
) -> PeisResult:
    """Fit the Gaussian family segment by segment.

    Parameters
    ----------
    model : DynamicModel
        Markov with scalar state.
    schedule : ConstraintSchedule
    m : int
        Pilot trajectories per iteration.
    max_iters : int
    tol : float
        Stop once the largest relative change of any coefficient (relative
        to ``max(|old|, 1)``) drops below ``tol``.
    eps : float
        Fitted quadratic coefficients above ``-eps`` are projected to
        ``-eps`` and flagged.
    initial_params : dict, optional
        Starting coefficients per time; by default iteration 0 samples
        from the model itself.

    Raises
    ------
    PeisError
        If a regression design is singular.
    """
    if not model.markov or model.state_dim != 1:
        raise ConfigurationError("the Gaussian PEIS family needs a scalar Markov model")
    streams = as_streams(rng).child("peis")
    params: dict = dict(initial_params or {})
    result = PeisResult(params, None, model=model, schedule=schedule)
    for k, (first, lo, hi) in enumerate(strong_segments(schedule)):
        times = range(lo + 1, hi + 1)
        for it in range(max_iters):
            cur = {t: params[t] for t in times if t in params}
            proposal = constraint_aware(PeisProposal(model, cur) if cur else BootstrapProposal(model), model, schedule)
            x, logw = _start_segment(model, schedule, proposal, lo, m, streams.generator(k, it, "start"), diffuse)
            xs = {lo: x[:, 0]}
            for t in times:
                prefix = Prefix(x)
                x_new, logq = proposal.propose(t, prefix, streams.generator(k, it, t))
                logw = logw + incremental_weight(model, schedule, t, prefix, x_new, logq)
                x = x_new
                xs[t] = x[:, 0]
            if not np.any(np.isfinite(logw)):
                raise PeisError(f"every pilot has zero weight on segment ({lo}, {hi}]")
            w = np.exp(logw - np.max(logw))
            new = {}
            change = 0.0
            for t in range(hi, lo, -1):
                if isinstance(schedule[t], FixedPoint):
                    continue
                x_t, x_prev = xs[t], xs[t - 1]
                y = model.forward_logpdf(t, Prefix(x_prev[:, None]), x_t[:, None]) + schedule.log_likelihood(
                    t, x_t[:, None]
                )
                if t < hi:
                    y = y + _log_chi(model, schedule, {**params, **new}, t + 1, x_t)
                new[t] = _fit(y, x_t, x_prev, w, t, eps, result.flags)
                change = max(change, _relative_change(cur.get(t), new[t]))
            params.update(new)
            result.changes.setdefault(k, []).append(change)
            result.iterations[k] = it + 1
            result.converged[k] = change < tol
            if change < tol:
                break

    per_time = {}
    for first, lo, hi in strong_segments(schedule):
        for t in range(first, hi):
            per_time[t] = lambda t_, view, s=t + 1: _log_chi(model, schedule, params, s, view.current[:, 0])
    result.estimators = PriorityEstimatorSet(schedule, per_time, kind="peis")
    return result
