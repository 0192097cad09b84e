"""Estimators of the future-constraint likelihood used in priority scores."""

from csmc.priority.backward import (
    BackwardKernel,
    ForwardStepKernel,
    GaussianTerminal,
    IncrementKernel,
    PointMassTerminal,
    ReflectedDriftKernel,
    TerminalProposal,
    TruncatedGaussianTerminal,
    backward_pilot_smoothing,
    default_terminal,
    strong_segments,
)
from csmc.priority.base import (
    OUTSIDE_RULES,
    HistogramEstimator,
    PriorityEstimatorSet,
    StateView,
    constant_priority,
    equal_width_partition,
    fixed_width_partition,
    heatmap_export,
    histograms_from_csv,
    histograms_to_csv,
    parametric_priority,
    weighted_histogram,
)
from csmc.priority.forward import (
    PerPathPilots,
    forward_pilot_smoothing,
    per_path_estimates,
    per_path_forward_pilots,
    simulate_pilots,
)
from csmc.priority.peis import GaussianPsi, PeisProposal, PeisResult, peis_optimize

__all__ = [
    "BackwardKernel",
    "ForwardStepKernel",
    "GaussianPsi",
    "GaussianTerminal",
    "HistogramEstimator",
    "OUTSIDE_RULES",
    "IncrementKernel",
    "PeisProposal",
    "PeisResult",
    "PerPathPilots",
    "PointMassTerminal",
    "PriorityEstimatorSet",
    "ReflectedDriftKernel",
    "StateView",
    "TerminalProposal",
    "TruncatedGaussianTerminal",
    "backward_pilot_smoothing",
    "constant_priority",
    "default_terminal",
    "equal_width_partition",
    "fixed_width_partition",
    "forward_pilot_smoothing",
    "heatmap_export",
    "histograms_from_csv",
    "histograms_to_csv",
    "parametric_priority",
    "peis_optimize",
    "per_path_estimates",
    "per_path_forward_pilots",
    "simulate_pilots",
    "strong_segments",
    "weighted_histogram",
]
