"""Independent reference implementations used as test oracles and baselines."""

from csmc.oracles.grid import GridMarginal, grid_marginal
from csmc.oracles.exact import (
    EnumerationResult,
    bridge_density,
    bridge_log_density,
    enumerate_future_likelihood,
    enumerate_posterior,
)
from csmc.oracles.kalman import KalmanResult, LinearGaussianSpec, future_log_likelihood, kalman_smooth
from csmc.oracles.truncnorm import truncated_normal, truncated_normal_logpdf, truncated_normal_mean
from csmc.oracles.viterbi import DiscreteGrid, viterbi_map

__all__ = [
    "DiscreteGrid",
    "EnumerationResult",
    "GridMarginal",
    "KalmanResult",
    "LinearGaussianSpec",
    "bridge_density",
    "bridge_log_density",
    "enumerate_future_likelihood",
    "enumerate_posterior",
    "future_log_likelihood",
    "grid_marginal",
    "kalman_smooth",
    "truncated_normal",
    "truncated_normal_logpdf",
    "truncated_normal_mean",
    "viterbi_map",
]
