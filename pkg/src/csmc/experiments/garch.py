"""Long-run marginal expected shortfall under a GJR-GARCH / DCC market-firm model.

Log prices start at zero.  For the market,

    x_{m,t} = x_{m,t-1} + sigma_{m,t} eps_{m,t}
    sigma_{m,t+1}^2 = omega_m + (alpha_m + gamma_m 1[eps_{m,t} < 0]) (sigma_{m,t} eps_{m,t})^2 + beta_m sigma_{m,t}^2

and similarly for the firm, whose shock ``eps_f = rho eps_m + sqrt(1 - rho^2) xi``
takes its correlation ``rho`` from the 2x2 DCC recursion

    Q_{t+1} = (1 - a_C - b_C) Qbar + a_C r_t r_t' + b_C Q_t,   r_t = (sigma_{m,t} eps_{m,t}, sigma_{f,t} eps_{f,t}).

The target is ``E[1 - exp(x_{f,T}) | x_{m,T} < c]``.  Market paths are drawn
under the constraint first; firm paths are then simulated conditionally on
each market path.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import log_ndtr

from csmc.engine import ResamplingPolicy, RunReport, estimate, run_csmc, run_drifted_smc, run_rejection
from csmc.errors import ConfigurationError, ModelError, RejectionError
from csmc.model import ConstraintSchedule, DriftedProposal, DynamicModel, Subset, gaussian_logpdf
from csmc.particles import ParticleEnsemble
from csmc.priority.base import PriorityEstimatorSet, StateView, parametric_priority
from csmc.streams import Streams, as_streams

LRMES_METHODS = ("rejection", "drifted-smc", "csmc-parametric", "csmc-forward-pilot")


@dataclass(frozen=True)
class GjrGarchDccParams:
    """Model parameters; defaults are the fitted values for an index/bank pair.

    ``alpha_m`` defaults to the printed value ``3.35e-6``, which coincides
    with ``omega_m``; override it if a different fit is wanted.
    """

    omega_m: float = 3.35e-6
    alpha_m: float = 3.35e-6
    gamma_m: float = 0.152
    beta_m: float = 0.858
    omega_f: float = 4.22e-6
    alpha_f: float = 0.0148
    gamma_f: float = 0.0542
    beta_f: float = 0.935
    alpha_c: float = 0.0755
    beta_c: float = 0.862
    sigma_m1: float = 0.0113
    sigma_f1: float = 0.03
    r_f1: float = 0.705
    c: float = float(np.log(0.6))
    T: int = 126

    def __post_init__(self):
        for name in ("omega_m", "omega_f", "sigma_m1", "sigma_f1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha_m", "gamma_m", "beta_m", "alpha_f", "gamma_f", "beta_f", "alpha_c", "beta_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not -1 < self.r_f1 < 1:
            raise ValueError("r_f1 must lie in (-1, 1)")
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        if self.alpha_c + self.beta_c >= 1:
            raise ValueError("alpha_c + beta_c must be < 1")
        for tag in ("m", "f"):
            a, g, b = (getattr(self, f"{k}_{tag}") for k in ("alpha", "gamma", "beta"))
            if a + g / 2 + b >= 1:
                warnings.warn(f"GJR block '{tag}' has alpha + gamma/2 + beta >= 1", RuntimeWarning, stacklevel=2)

    @property
    def qbar(self) -> np.ndarray:
        sm, sf, r = self.sigma_m1, self.sigma_f1, self.r_f1
        return np.array([[sm * sm, r * sm * sf], [r * sm * sf, sf * sf]])

    @property
    def long_run_var_m(self) -> float:
        """Unconditional market variance ``omega / (1 - alpha - gamma/2 - beta)``."""
        persist = self.alpha_m + self.gamma_m / 2 + self.beta_m
        if persist >= 1:
            raise ValueError("market GJR block is not covariance stationary")
        return self.omega_m / (1 - persist)


@dataclass
class GarchDccState:
    """Quantities known at ``t-1`` that drive step ``t``.

    ``var_m``/``var_f`` are ``sigma_t^2`` and ``Q`` is ``Q_t`` (arrays of
    shape ``(n,)`` and ``(n, 2, 2)``).
    """

    x_m: np.ndarray
    var_m: np.ndarray
    x_f: np.ndarray
    var_f: np.ndarray
    Q: np.ndarray

    @classmethod
    def initial(cls, params: GjrGarchDccParams, n: int) -> "GarchDccState":
        return cls(
            np.zeros(n),
            np.full(n, params.sigma_m1**2),
            np.zeros(n),
            np.full(n, params.sigma_f1**2),
            np.tile(params.qbar, (n, 1, 1)),
        )

    @property
    def rho(self) -> np.ndarray:
        Q = self.Q
        return Q[:, 0, 1] / np.sqrt(Q[:, 0, 0] * Q[:, 1, 1])


def _gjr(omega, alpha, gamma, beta, ret, var):
    return omega + (alpha + gamma * (ret < 0)) * ret * ret + beta * var


def garch_dcc_step(params: GjrGarchDccParams, state: GarchDccState, eps_m, xi_f) -> GarchDccState:
    """Advance both return equations, both variances and the DCC matrix by one day."""
    eps_m = np.asarray(eps_m, dtype=float)
    xi_f = np.asarray(xi_f, dtype=float)
    if np.any(state.var_m <= 0) or np.any(state.var_f <= 0):
        raise ModelError("conditional variances must stay positive")
    rho = state.rho
    eps_f = rho * eps_m + np.sqrt(1 - rho * rho) * xi_f
    r_m = np.sqrt(state.var_m) * eps_m
    r_f = np.sqrt(state.var_f) * eps_f
    p = params
    r = np.stack([r_m, r_f], axis=1)
    Q = (1 - p.alpha_c - p.beta_c) * p.qbar + p.alpha_c * r[:, :, None] * r[:, None, :] + p.beta_c * state.Q
    det = Q[:, 0, 0] * Q[:, 1, 1] - Q[:, 0, 1] ** 2
    if np.any(Q[:, 0, 0] <= 0) or np.any(det <= 0):
        raise ModelError("DCC matrix lost positive definiteness")
    return GarchDccState(
        state.x_m + r_m,
        _gjr(p.omega_m, p.alpha_m, p.gamma_m, p.beta_m, r_m, state.var_m),
        state.x_f + r_f,
        _gjr(p.omega_f, p.alpha_f, p.gamma_f, p.beta_f, r_f, state.var_f),
        Q,
    )


class GjrMarketModel(DynamicModel):
    """Market log price with summary ``S_t = (x_{m,t}, sigma_{m,t+1}^2)``.

    The forward kernel is ``N(S_0, S_1)``; the model is not Markov in
    ``x_m`` alone, but it is Markov in the summary.
    """

    state_dim = 1
    markov = False
    summary_dim = 2

    def __init__(self, params: GjrGarchDccParams):
        self.params = params

    def sample_initial(self, n, rng):
        return np.zeros((n, 1))

    def initial_logpdf(self, x):
        return np.where(x[:, 0] == 0.0, 0.0, -np.inf)

    def forward_moments(self, t, prefix):
        s = prefix.stats
        return s[:, 0:1], s[:, 1:2]

    def sample_forward(self, t, prefix, rng):
        mean, var = self.forward_moments(t, prefix)
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def forward_logpdf(self, t, prefix, x):
        mean, var = self.forward_moments(t, prefix)
        return gaussian_logpdf(x[:, 0], mean[:, 0], var[:, 0])

    def summary_init(self, x0):
        return np.column_stack([x0[:, 0], np.full(x0.shape[0], self.params.sigma_m1**2)])

    def summary_update(self, t, stats, x):
        p = self.params
        ret = x[:, 0] - stats[:, 0]
        return np.column_stack([x[:, 0], _gjr(p.omega_m, p.alpha_m, p.gamma_m, p.beta_m, ret, stats[:, 1])])


def market_schedule(params: GjrGarchDccParams) -> ConstraintSchedule:
    return ConstraintSchedule.from_mapping(params.T, {params.T: Subset.below(params.c)})


def market_variances(params: GjrGarchDccParams, market_paths: np.ndarray) -> np.ndarray:
    """``sigma_{m,t}^2`` for ``t = 1..T`` along given market paths ``(n, T+1)``."""
    p = params
    n, T1 = market_paths.shape
    var = np.empty((n, T1 - 1))
    v = np.full(n, p.sigma_m1**2)
    for t in range(1, T1):
        var[:, t - 1] = v
        ret = market_paths[:, t] - market_paths[:, t - 1]
        v = _gjr(p.omega_m, p.alpha_m, p.gamma_m, p.beta_m, ret, v)
    return var


def simulate_firm(params: GjrGarchDccParams, market_paths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw firm log-price paths given market paths, shape ``(n, T+1)`` each."""
    market_paths = np.asarray(market_paths, dtype=float)
    n, T1 = market_paths.shape
    var_m = market_variances(params, market_paths)
    state = GarchDccState.initial(params, n)
    out = np.zeros((n, T1))
    for t in range(1, T1):
        eps_m = (market_paths[:, t] - market_paths[:, t - 1]) / np.sqrt(var_m[:, t - 1])
        state = garch_dcc_step(params, state, eps_m, rng.standard_normal(n))
        out[:, t] = state.x_f
    return out


def simulate_joint(params: GjrGarchDccParams, n: int, rng: np.random.Generator, T: int | None = None):
    """Unconstrained joint simulation; returns market and firm paths ``(n, T+1)``."""
    T = params.T if T is None else T
    state = GarchDccState.initial(params, n)
    xm = np.zeros((n, T + 1))
    xf = np.zeros((n, T + 1))
    for t in range(1, T + 1):
        state = garch_dcc_step(params, state, rng.standard_normal(n), rng.standard_normal(n))
        xm[:, t], xf[:, t] = state.x_m, state.x_f
    return xm, xf


# ---------------------------------------------------------------------------
# Priority estimators for the market constraint x_{m,T} < c
# ---------------------------------------------------------------------------


def gaussian_tail_priority(params: GjrGarchDccParams, schedule: ConstraintSchedule) -> PriorityEstimatorSet:
    """``Phi(c; x_t, (T - t) sigma_bar^2)`` with the long-run market variance."""
    vbar = params.long_run_var_m
    T, c = params.T, params.c

    def form(t, stats):
        return log_ndtr((c - stats[:, 0]) / np.sqrt((T - t) * vbar))

    return parametric_priority(schedule, form, argument="summary", log=True)


@dataclass(frozen=True)
class SigmaBinnedCdf:
    """Estimate of ``P(x_T - x_t < delta | sigma_{t+1})`` from weighted pilots.

    Pilots are grouped by ``sigma_{t+1}`` into cells ``(w (d-1), w d]``.
    Within a cell the estimate is ``sum_j U_j 1[Delta_j < delta] / count``.
    Queries whose cell holds no pilot use the nearest populated cell.
    """

    width: float
    cells: np.ndarray  # populated cell labels d, ascending
    deltas: tuple  # per cell: ascending increments
    cum_weights: tuple  # per cell: cumulative U / count, aligned with deltas
    c: float

    def cell_of(self, sigma):
        return np.ceil(np.asarray(sigma) / self.width).astype(np.int64)

    def log_cdf(self, sigma, delta) -> np.ndarray:
        d = self.cell_of(sigma)
        pos = np.clip(np.searchsorted(self.cells, d), 0, self.cells.size - 1)
        left = np.clip(pos - 1, 0, self.cells.size - 1)
        use_left = np.abs(self.cells[left] - d) < np.abs(self.cells[pos] - d)
        which = np.where(use_left, left, pos)
        out = np.empty(np.shape(delta))
        for k in np.unique(which):
            sel = which == k
            cw = self.cum_weights[k]
            j = np.searchsorted(self.deltas[k], delta[sel], side="left")
            val = np.where(j > 0, cw[np.maximum(j - 1, 0)], 0.0)
            with np.errstate(divide="ignore"):
                out[sel] = np.log(val)
        return out

    def __call__(self, t, view: StateView):
        s = view.stats
        return self.log_cdf(np.sqrt(s[:, 1]), self.c - s[:, 0])


def sigma_cdf_priority(
    params: GjrGarchDccParams,
    schedule: ConstraintSchedule,
    m: int,
    rng: Streams | int | None = None,
    width: float = 0.005,
) -> PriorityEstimatorSet:
    """Forward-pilot estimator of ``p(x_{m,T} < c | x_{m,t}, sigma_{m,t+1})``.

    ``m`` pilots start from ``S_0`` and are propagated with the drifted
    kernel (drift ``c / T`` at every step, no truncation) carrying weights
    ``u_s = p / q``.  For each ``t`` the pilots' summaries, increments
    ``x_T - x_t`` and weights ``U_t = prod_{s>t} u_s`` feed a
    :class:`SigmaBinnedCdf`.
    """
    streams = as_streams(rng).child("sigma-cdf-pilots")
    model = GjrMarketModel(params)
    T, c = params.T, params.c
    drift = c / T
    x = np.zeros((m, 1))
    stats = model.summary_init(x)
    stats_t = [stats]
    xs = [x[:, 0]]
    log_u = []
    for t in range(1, T + 1):
        mean, var = stats[:, 0], stats[:, 1]
        z = streams.generator("step", t).standard_normal(m)
        xn = mean + drift + np.sqrt(var) * z
        log_u.append(gaussian_logpdf(xn, mean, var) - gaussian_logpdf(xn, mean + drift, var))
        stats = model.summary_update(t, stats, xn[:, None])
        stats_t.append(stats)
        xs.append(xn)
    log_U = np.zeros(m)
    per_time = {}
    for t in range(T - 1, -1, -1):
        log_U = log_U + log_u[t]
        sigma = np.sqrt(stats_t[t][:, 1])
        delta = xs[T] - xs[t]
        U = np.exp(log_U)
        cell = np.ceil(sigma / width).astype(np.int64)
        labels = np.unique(cell)
        deltas, cums = [], []
        for d in labels:
            sel = cell == d
            order = np.argsort(delta[sel], kind="stable")
            deltas.append(delta[sel][order])
            cums.append(np.cumsum(U[sel][order]) / sel.sum())
        per_time[t] = SigmaBinnedCdf(width, labels, tuple(deltas), tuple(cums), c)
    return PriorityEstimatorSet(schedule, per_time, kind="sigma-cdf-pilot", info={"m": m, "width": width})


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


@dataclass
class LrmesResult:
    method: str
    estimate: float
    se: float
    report: RunReport
    market_paths: np.ndarray
    firm_paths: np.ndarray
    wall_time: float
    acceptance_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "method": self.method,
            "lrmes": self.estimate,
            "se": self.se,
            "wall_time": self.wall_time,
            "acceptance_rate": self.acceptance_rate,
        }
        out.update(self.extra)
        return out


def lrmes_from_ensemble(params, ensemble: ParticleEnsemble, rng: np.random.Generator):
    """Simulate firm paths for each market path and form the weighted LRMES."""
    xm = ensemble.paths[:, :, 0]
    xf = simulate_firm(params, xm, rng)
    est, se = estimate(ensemble, 1.0 - np.exp(xf[:, -1]))
    return est, se, xf


def run_lrmes(
    params: GjrGarchDccParams | None = None,
    method: str = "csmc-forward-pilot",
    n: int = 10_000,
    seed: int | Streams = 0,
    m: int = 1_000,
    resample_every: int = 5,
    max_attempts: int = 10**6,
    rejection_target: int | None = None,
    sigma_width: float = 0.005,
    workers: int = 1,
) -> LrmesResult:
    """Estimate LRMES with one of :data:`LRMES_METHODS`.

    ``n`` is the particle count for the sequential methods.  For
    ``"rejection"`` the run stops at ``rejection_target`` acceptances or
    ``max_attempts`` attempts.
    """
    params = params or GjrGarchDccParams()
    if method not in LRMES_METHODS:
        raise ConfigurationError(f"unknown LRMES method {method!r}; expected one of {LRMES_METHODS}")
    streams = as_streams(seed).child("lrmes", method)
    model = GjrMarketModel(params)
    schedule = market_schedule(params)
    clock = time.perf_counter()
    extra = {}
    if method == "rejection":
        report = run_rejection(model, schedule, rejection_target, max_attempts, streams.child("market"))
    elif method == "drifted-smc":
        drift = params.c / params.T
        proposal = DriftedProposal(model, lambda t: drift if t < params.T else 0.0)
        report = run_drifted_smc(model, schedule, proposal, n, streams.child("market"), workers=workers)
    else:
        if method == "csmc-parametric":
            est = gaussian_tail_priority(params, schedule)
        else:
            est = sigma_cdf_priority(params, schedule, m, streams.child("pilots"), sigma_width)
        extra["pilot_time"] = time.perf_counter() - clock
        policy = ResamplingPolicy.every(resample_every, "estimator")
        report = run_csmc(model, schedule, None, est, policy, n, streams.child("market"), workers=workers)
    value, se, xf = lrmes_from_ensemble(params, report.ensemble, streams.generator("firm"))
    return LrmesResult(
        method,
        value,
        se,
        report,
        report.ensemble.paths[:, :, 0],
        xf,
        time.perf_counter() - clock,
        report.acceptance_rate,
        extra,
    )


def rejection_for(params, seconds: float, seed, batch: int = 20_000) -> LrmesResult:
    """Rejection LRMES run that keeps drawing batches until ``seconds`` have elapsed."""
    params = params or GjrGarchDccParams()
    streams = as_streams(seed).child("lrmes", "rejection-timed")
    model = GjrMarketModel(params)
    schedule = market_schedule(params)
    clock = time.perf_counter()
    paths, attempts, b = [], 0, 0
    while time.perf_counter() - clock < seconds or not paths:
        try:
            rep = run_rejection(model, schedule, None, batch, streams.child(b), batch=batch)
            paths.append(rep.ensemble.paths)
        except RejectionError:
            pass  # a batch without acceptances
        attempts += batch
        b += 1
    allp = np.concatenate(paths)
    ens = ParticleEnsemble(allp, np.zeros(allp.shape[0]))
    value, se, xf = lrmes_from_ensemble(params, ens, streams.generator("firm"))
    report = RunReport(ens, np.full(params.T + 1, np.nan), np.zeros(params.T + 1, bool), [], [],
                       np.zeros(params.T + 1, np.int64), n=ens.n, attempts=attempts, accepted=ens.n)
    return LrmesResult("rejection", value, se, report, allp[:, :, 0], xf, time.perf_counter() - clock,
                       ens.n / attempts, {"attempts": attempts})


def params_dict(params: GjrGarchDccParams) -> dict:
    return asdict(params)


@dataclass(frozen=True)
class LrmesExperimentConfig(GjrGarchDccParams):
    """Model parameters plus sampler settings, as read from a run config."""

    n: int = 10_000
    m: int = 1_000
    resample_every: int = 5
    max_attempts: int = 10**6
    rejection_target: int | None = None
    sigma_width: float = 0.005

    def __post_init__(self):
        super().__post_init__()
        for name in ("n", "m", "resample_every", "max_attempts"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.rejection_target is not None and self.rejection_target < 1:
            raise ConfigurationError("rejection_target must be >= 1")
        if not self.sigma_width > 0:
            raise ConfigurationError("sigma_width must be positive")

    def model_params(self) -> GjrGarchDccParams:
        base = {f.name for f in fields(GjrGarchDccParams)}
        return GjrGarchDccParams(**{k: v for k, v in asdict(self).items() if k in base})

    def run(self, method: str, seed, workers: int = 1) -> LrmesResult:
        return run_lrmes(self.model_params(), method, self.n, seed, self.m, self.resample_every,
                         self.max_attempts, self.rejection_target, self.sigma_width, workers)
