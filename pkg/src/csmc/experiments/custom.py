"""User-specified scalar linear-Gaussian state-space model.

This is the ``custom`` experiment of the CLI: ``x_t = coef * x_{t-1} + N(0,
noise_var)`` observed through ``y_t = x_t + N(0, obs_var)``.  Missing
observations are given as ``null``.  Because the model is linear and
Gaussian, every run also reports the exact smoothing means.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from csmc.engine import ResamplingPolicy, RunReport, marginal_means, run_csmc
from csmc.errors import ConfigurationError
from csmc.model import BootstrapProposal, ConstraintSchedule, FixedPoint, Observation, constraint_aware
from csmc.models import LinearGaussianModel
from csmc.oracles.kalman import LinearGaussianSpec, kalman_smooth
from csmc.priority.backward import backward_pilot_smoothing
from csmc.priority.base import OUTSIDE_RULES
from csmc.priority.forward import forward_pilot_smoothing
from csmc.priority.peis import peis_optimize
from csmc.streams import Streams, as_streams

CUSTOM_METHODS = ("smc", "csmc-bp", "csmc-fp", "csmc-peis")


@dataclass(frozen=True)
class CustomExperimentConfig:
    """Model, data and sampler settings.

    ``observations`` has one entry per time ``1..T`` (``None`` for a gap);
    when empty, data are simulated from the model with the run seed.
    ``strong_times`` marks which observation times drive the lookahead, and
    ``end_point`` optionally pins ``x_T`` exactly (always strong).
    ``outside`` sets how pilot histograms treat states beyond the pilot
    range (see :class:`csmc.priority.base.HistogramEstimator`).
    """

    T: int = 10
    coef: float = 1.0
    noise_var: float = 1.0
    x0_mean: float = 0.0
    x0_var: float = 0.0
    obs_var: float = 1.0
    observations: tuple = ()
    strong_times: tuple = ()
    end_point: float | None = None
    n: int = 2000
    m: int = 1000
    cells: int = 50
    ess_fraction: float = 0.5
    peis_iters: int = 20
    outside: str = "fallback"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if not self.noise_var > 0:
            raise ConfigurationError("noise_var must be positive")
        if not self.obs_var > 0:
            raise ConfigurationError("obs_var must be positive")
        if self.x0_var < 0:
            raise ConfigurationError("x0_var must be nonnegative")
        if self.observations and len(self.observations) != self.T:
            raise ConfigurationError(f"observations must have T={self.T} entries (times 1..T)")
        for t in self.strong_times:
            if not (isinstance(t, int) and 1 <= t <= self.T):
                raise ConfigurationError(f"strong_times entry {t!r} is not a time in 1..T")
        for key in ("n", "m", "cells", "peis_iters"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1")
        if not 0 < self.ess_fraction <= 1:
            raise ConfigurationError("ess_fraction must lie in (0, 1]")
        if self.outside not in OUTSIDE_RULES:
            raise ConfigurationError(f"outside must be one of {OUTSIDE_RULES}")

    @property
    def spec(self) -> LinearGaussianSpec:
        return LinearGaussianSpec(self.coef, self.noise_var, 1.0, self.x0_mean, self.x0_var)

    def data(self, streams: Streams) -> np.ndarray:
        """Observations at ``0..T`` with ``nan`` for gaps (time 0 is never observed)."""
        if self.observations:
            y = [np.nan] + [np.nan if v is None else float(v) for v in self.observations]
            return np.array(y)
        rng = streams.generator("data")
        x = self.x0_mean + np.sqrt(self.x0_var) * rng.standard_normal()
        y = np.full(self.T + 1, np.nan)
        for t in range(1, self.T + 1):
            x = self.coef * x + np.sqrt(self.noise_var) * rng.standard_normal()
            y[t] = x + np.sqrt(self.obs_var) * rng.standard_normal()
        return y


def custom_problem(config: CustomExperimentConfig, y: np.ndarray):
    model = LinearGaussianModel(config.coef, config.noise_var, config.x0_mean, config.x0_var)
    strong = set(config.strong_times)
    cons = {}
    for t in range(1, config.T + 1):
        if not np.isnan(y[t]):
            cons[t] = Observation.gaussian(float(y[t]), config.obs_var, strong=t in strong)
    if config.end_point is not None:
        cons[config.T] = FixedPoint(float(config.end_point))
    return model, ConstraintSchedule.from_mapping(config.T, cons)


@dataclass
class CustomResult:
    method: str
    report: RunReport
    observations: np.ndarray
    means: np.ndarray
    mean_se: np.ndarray
    exact_means: np.ndarray
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        err = self.means - self.exact_means
        return {
            "method": self.method,
            "max_abs_error_vs_exact": float(np.max(np.abs(err))),
            "final_ess": self.report.final_ess,
            "resample_count": len(self.report.resample_times),
            **self.extra,
        }


def custom_estimators(config: CustomExperimentConfig, method: str, seed=0, y: np.ndarray | None = None):
    """Proposal and estimator set (``None`` for ``smc``) that :func:`run_custom` uses."""
    y = config.data(as_streams(seed).child("custom")) if y is None else y
    model, schedule = custom_problem(config, y)
    pilots = as_streams(seed).child("custom", method, "pilots")
    proposal, est = BootstrapProposal(model), None
    if method == "csmc-bp":
        est = backward_pilot_smoothing(model, schedule, config.m, pilots, cells=config.cells, outside=config.outside)
    elif method == "csmc-fp":
        est = forward_pilot_smoothing(model, schedule, config.m, pilots, cells=config.cells, outside=config.outside)
    elif method == "csmc-peis":
        fit = peis_optimize(model, schedule, config.m, pilots, max_iters=config.peis_iters)
        return fit.proposal(), fit.estimators
    return constraint_aware(proposal, model, schedule), est


def run_custom(config: CustomExperimentConfig | None = None, method: str = "csmc-bp", seed=0, workers: int = 1):
    config = config or CustomExperimentConfig()
    if method not in CUSTOM_METHODS:
        raise ConfigurationError(f"unknown custom method {method!r}; expected one of {CUSTOM_METHODS}")
    streams = as_streams(seed).child("custom", method)
    y = config.data(as_streams(seed).child("custom"))
    model, schedule = custom_problem(config, y)
    clock = time.perf_counter()
    proposal, est = custom_estimators(config, method, seed, y)
    scores = "weight" if method == "smc" else "estimator"
    policy = ResamplingPolicy.ess(config.ess_fraction, scores)
    report = run_csmc(model, schedule, proposal, est, policy, config.n, streams.child("run"), workers=workers)
    means, se = marginal_means(report.ensemble)
    obs_var = np.full(config.T + 1, config.obs_var)
    y_k = y.copy()
    if config.end_point is not None:
        y_k[config.T], obs_var[config.T] = config.end_point, 0.0
    exact = kalman_smooth(config.spec, y_k, obs_var).smoothed_mean
    return CustomResult(method, report, y, means, se, exact, {"wall_time": time.perf_counter() - clock})
