"""Constrained trading paths: sampling, MSE against a reference and Viterbi utility.

A position path starts and ends flat (``x_0 = x_T = 0``) and should track an
ideal path ``y_t`` while paying a trading cost.  The utility

    u(x) = -sum_{t=1}^{T} c(x_t - x_{t-1}) - sum_{t=1}^{T-1} h(y_t - x_t)
    c(d) = (d^2 + 2 alpha |d|) / (2 s_x^2),   h(e) = e^2 / (2 s_y^2)

is the log of an unnormalised posterior of a state space model with kernel
``exp(-c)`` and observation density ``exp(-h)``.  Samples from that posterior
give state grids on which the Viterbi recursion maximises ``u``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from csmc.engine import ResamplingPolicy, RunReport, marginal_means, run_csmc
from csmc.errors import ConfigurationError
from csmc.model import BootstrapProposal, ConstraintSchedule, DynamicModel, FixedPoint, Observation
from csmc.oracles.kalman import LinearGaussianSpec, kalman_smooth
from csmc.oracles.truncnorm import truncated_normal
from csmc.oracles.viterbi import DiscreteGrid, viterbi_map
from csmc.particles import ParticleEnsemble
from csmc.priority.backward import IncrementKernel, backward_pilot_smoothing
from csmc.priority.base import OUTSIDE_RULES, PriorityEstimatorSet
from csmc.streams import Streams, as_streams

TRADING_METHODS = ("smc", "csmc-bp")


@dataclass(frozen=True)
class TradingExperimentConfig:
    T: int = 20
    sigma_x2: float = 0.25
    sigma_y2: float = 1.0
    alpha: float = 0.0
    n: int = 2000
    smc_n: int | None = None
    m: int = 300
    L: int = 200
    ess_fraction: float = 0.3
    cells: int = 50
    grid_cap: int = 512
    reference_n: int = 200_000
    outside: str = "fallback"
    pilot_resample: float | None = None

    def __post_init__(self):
        if self.T < 2:
            raise ConfigurationError("T must be at least 2")
        if not self.sigma_x2 > 0:
            raise ConfigurationError("sigma_x2 must be positive")
        if not self.sigma_y2 > 0:
            raise ConfigurationError("sigma_y2 must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        for key in ("n", "m", "L", "grid_cap", "reference_n"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be positive")
        if self.smc_n is not None and self.smc_n < 1:
            raise ConfigurationError("smc_n must be positive")
        if self.outside not in OUTSIDE_RULES:
            raise ConfigurationError(f"outside must be one of {OUTSIDE_RULES}")
        if self.pilot_resample is not None and not 0 < self.pilot_resample <= 1:
            raise ConfigurationError("pilot_resample must lie in (0, 1]")

    @property
    def sizes(self) -> dict:
        """Particle counts at matched compute; SMC defaults to ``round(1.15 n)``."""
        smc = self.smc_n if self.smc_n is not None else int(round(1.15 * self.n))
        return {"smc": smc, "csmc-bp": self.n}

    @property
    def ideal_path(self) -> np.ndarray:
        """``y_t`` for ``t = 0..T``; the endpoints are ``nan`` (no observation)."""
        t = np.arange(self.T + 1, dtype=float)
        y = 25.0 * np.exp(-(t + 1) / 8) - 40.0 * np.exp(-(t + 1) / 4)
        y[0] = y[-1] = np.nan
        return y


# ---------------------------------------------------------------------------
# Trade-size kernel exp(-(d^2 + 2 alpha |d|) / (2 s^2)) / Z
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TradeKernel:
    alpha: float
    var: float

    @property
    def log_normalizer(self) -> float:
        """``log Z`` from the two mirrored half-Gaussian pieces."""
        a, s = self.alpha, np.sqrt(self.var)
        return float(np.log(2.0) + a * a / (2 * self.var) + np.log(s) + 0.5 * np.log(2 * np.pi) + log_ndtr(-a / s))

    def cost(self, d):
        d = np.asarray(d, dtype=float)
        return (d * d + 2 * self.alpha * np.abs(d)) / (2 * self.var)

    def logpdf(self, d):
        return -self.cost(d) - self.log_normalizer

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # |d| has density proportional to N(-alpha, var) on [0, inf)
        size = abs(truncated_normal(self.alpha, self.var, 0.0, rng, size=n))
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return sign * size

    @property
    def second_moment(self) -> float:
        a = self.alpha / np.sqrt(self.var)
        lam = np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi) / ndtr(-a)
        s = np.sqrt(self.var)
        mean = -self.alpha + s * lam
        return float(self.var * (1 + a * lam - lam * lam) + mean * mean)


class TradingModel(DynamicModel):
    """Random walk of positions with :class:`TradeKernel` increments, started at 0."""

    state_dim = 1
    markov = True

    def __init__(self, kernel: TradeKernel):
        self.kernel = kernel

    def sample_initial(self, n, rng):
        return np.zeros((n, 1))

    def initial_logpdf(self, x):
        return np.where(x[:, 0] == 0.0, 0.0, -np.inf)

    def sample_forward(self, t, prefix, rng):
        return prefix.last + self.kernel.sample(prefix.last.shape[0], rng)[:, None]

    def forward_logpdf(self, t, prefix, x):
        return self.kernel.logpdf(x[:, 0] - prefix.last[:, 0])

    def forward_moments(self, t, prefix):
        return prefix.last, np.full_like(prefix.last, self.kernel.second_moment)


def trading_problem(config: TradingExperimentConfig):
    model = TradingModel(TradeKernel(config.alpha, config.sigma_x2))
    y = config.ideal_path
    cons = {0: FixedPoint(0.0, strong=False), config.T: FixedPoint(0.0)}
    for t in range(1, config.T):
        cons[t] = Observation.gaussian(float(y[t]), config.sigma_y2)
    return model, ConstraintSchedule.from_mapping(config.T, cons)


def utility(paths: np.ndarray, config: TradingExperimentConfig) -> np.ndarray:
    """``u`` for each row of ``paths`` with shape ``(n, T+1)``."""
    paths = np.atleast_2d(paths)
    kernel = TradeKernel(config.alpha, config.sigma_x2)
    y = config.ideal_path[1:-1]
    track = ((y - paths[:, 1:-1]) ** 2).sum(axis=1) / (2 * config.sigma_y2)
    return -kernel.cost(np.diff(paths, axis=1)).sum(axis=1) - track


def kalman_reference(config: TradingExperimentConfig):
    """Exact posterior mean path and variances for ``alpha = 0``."""
    if config.alpha != 0:
        raise ConfigurationError("the Kalman reference requires alpha = 0")
    y = config.ideal_path.copy()
    y[-1] = 0.0
    R = np.full(config.T + 1, config.sigma_y2)
    R[-1] = 0.0
    res = kalman_smooth(LinearGaussianSpec(1.0, config.sigma_x2, 1.0, 0.0, 0.0), y, R)
    return res.smoothed_mean, res.smoothed_var


# ---------------------------------------------------------------------------
# Viterbi over sampled grids
# ---------------------------------------------------------------------------


def sample_grids(ensemble: ParticleEnsemble, cap: int = 512) -> list[np.ndarray]:
    """Per-time distinct sampled states, keeping the ``cap`` heaviest.

    A state's weight is the total normalised weight of the particles at it;
    killed particles are ignored.  Ties keep the smaller state.
    """
    alive = ensemble.alive()
    w = ensemble.normalized_weights()[alive]
    paths = ensemble.paths[alive, :, 0]
    grids = []
    for t in range(paths.shape[1]):
        vals, inv = np.unique(paths[:, t], return_inverse=True)
        mass = np.bincount(inv, weights=w, minlength=vals.size)
        if vals.size > cap:
            keep = np.sort(np.lexsort((vals, -mass))[:cap])
            vals = vals[keep]
        grids.append(vals)
    return grids


def viterbi_utility(ensemble: ParticleEnsemble, config: TradingExperimentConfig, cap: int | None = None):
    """Best utility over paths through the sampled grids; returns ``(u, path)``."""
    grids = sample_grids(ensemble, config.grid_cap if cap is None else cap)
    grids[0] = np.zeros(1)
    grids[-1] = np.zeros(1)
    kernel = TradeKernel(config.alpha, config.sigma_x2)
    y = config.ideal_path

    def emit(t, s):
        if t == 0 or t == config.T:
            return np.zeros_like(s)
        return -((y[t] - s) ** 2) / (2 * config.sigma_y2)

    grid = DiscreteGrid.from_functions(grids, lambda t, prev, cur: -kernel.cost(cur - prev), emit)
    _, path, score = viterbi_map(grid)
    return score, path


# ---------------------------------------------------------------------------
# Runs and replications
# ---------------------------------------------------------------------------


@dataclass
class TradingResult:
    method: str
    report: RunReport
    means: np.ndarray
    mean_se: np.ndarray
    viterbi_utility: float
    viterbi_path: np.ndarray
    extra: dict = field(default_factory=dict)


def _kernel_for_pilots(kernel: TradeKernel) -> IncrementKernel:
    # symmetric increments, so reversing time uses the same law
    return IncrementKernel(lambda n, rng: kernel.sample(n, rng), kernel.logpdf)


def trading_estimators(config: TradingExperimentConfig, seed: int | Streams = 0) -> PriorityEstimatorSet:
    """Backward-pilot estimators used by ``run_trading(config, "csmc-bp", seed)``."""
    model, schedule = trading_problem(config)
    streams = as_streams(seed).child("trading", "csmc-bp", "pilots")
    return backward_pilot_smoothing(model, schedule, config.m, streams, kernel=_kernel_for_pilots(model.kernel),
                                    cells=config.cells, outside=config.outside,
                                    resample_below=config.pilot_resample)


def run_trading(
    config: TradingExperimentConfig | None = None,
    method: str = "csmc-bp",
    seed: int | Streams = 0,
    n: int | None = None,
    viterbi: bool = True,
    workers: int = 1,
) -> TradingResult:
    """One sampling run with ``"smc"`` (weights as scores) or ``"csmc-bp"``.

    Both resample when the ESS of their scores drops below
    ``config.ess_fraction * n``.  ``csmc-bp`` scores particles by weight
    times a backward-pilot estimate of ``p(y_{t+1:T-1}, x_T | x_t)``.
    """
    config = config or TradingExperimentConfig()
    if method not in TRADING_METHODS:
        raise ConfigurationError(f"unknown trading method {method!r}; expected one of {TRADING_METHODS}")
    n = config.n if n is None else n
    streams = as_streams(seed).child("trading", method)
    model, schedule = trading_problem(config)
    clock = time.perf_counter()
    if method == "smc":
        est = None
        policy = ResamplingPolicy.ess(config.ess_fraction, "weight")
    else:
        est = trading_estimators(config, seed)
        policy = ResamplingPolicy.ess(config.ess_fraction, "estimator")
    report = run_csmc(model, schedule, BootstrapProposal(model), est, policy, n, streams.child("run"), workers=workers)
    means, se = marginal_means(report.ensemble)
    u, path = viterbi_utility(report.ensemble, config) if viterbi else (np.nan, None)
    return TradingResult(method, report, means, se, u, path, {"wall_time": time.perf_counter() - clock})


def reference_means(config: TradingExperimentConfig, seed: int | Streams = 0, workers: int = 1) -> np.ndarray:
    """Posterior means: Kalman for ``alpha = 0``, a large SMC run otherwise."""
    if config.alpha == 0:
        return kalman_reference(config)[0]
    res = run_trading(config, "smc", as_streams(seed).child("reference"), n=config.reference_n, viterbi=False,
                      workers=workers)
    return res.means


@dataclass
class ReplicationSummary:
    """Per-method MSE curves ``(T+1,)`` and Viterbi utilities ``(L,)``."""

    mse: dict
    utilities: dict
    reference: np.ndarray
    sizes: dict
    errors: dict = field(default_factory=dict)

    def median_utility(self, method: str) -> float:
        return float(np.median(self.utilities[method]))


def replicate(
    config: TradingExperimentConfig,
    sizes: dict,
    seed: int | Streams = 0,
    L: int | None = None,
    reference: np.ndarray | None = None,
    viterbi: bool = True,
    workers: int = 1,
) -> ReplicationSummary:
    """Repeat each method ``L`` times and collect MSE curves and utilities.

    ``sizes`` maps method to particle count, e.g. ``{"smc": 2300, "csmc-bp": 2000}``.
    Replication ``l`` uses the stream ``(seed, "replication", l)`` for every
    method; results do not depend on ``workers``.
    """
    L = config.L if L is None else L
    root = as_streams(seed)
    if reference is None:
        reference = reference_means(config, root.child("reference"))

    def one(args):
        method, l = args
        res = run_trading(config, method, root.child("replication", l), n=sizes[method], viterbi=viterbi)
        return res.means, res.viterbi_utility

    mse, utilities = {}, {}
    for method in sizes:
        jobs = [(method, l) for l in range(L)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                out = list(pool.map(one, jobs))
        else:
            out = [one(j) for j in jobs]
        means = np.array([o[0] for o in out])
        mse[method] = np.mean((means - reference) ** 2, axis=0)
        utilities[method] = np.array([o[1] for o in out])
    return ReplicationSummary(mse, utilities, reference, dict(sizes))


def optimal_utility(config: TradingExperimentConfig) -> float:
    """Exact maximum of ``u`` for ``alpha = 0`` (the Gaussian posterior mode is its mean)."""
    mean, _ = kalman_reference(config)
    return float(utility(mean[None, :], config)[0])
