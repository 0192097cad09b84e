"""Constrained sequential Monte Carlo with priority-score resampling."""

from csmc.engine import (
    ResamplingPolicy,
    RunReport,
    estimate,
    marginal_means,
    run_csmc,
    run_drifted_smc,
    run_rejection,
    run_segmental,
)
from csmc.errors import (
    ConfigurationError,
    CsmcError,
    DegenerateEnsembleError,
    EstimatorDegenerateError,
    InfeasibleError,
    ModelError,
    PeisError,
    RejectionError,
    WeightCollapseError,
)
from csmc.model import (
    BootstrapProposal,
    Constraint,
    ConstraintAwareProposal,
    ConstraintSchedule,
    DriftedProposal,
    DynamicModel,
    FixedPoint,
    Observation,
    Prefix,
    Proposal,
    Subset,
    Trivial,
    constraint_aware,
    constraint_log_likelihood,
    segmentize,
    t_plus,
)
from csmc.models import DiscreteMarkovModel, EulerMaruyamaModel, GaussianMarkovModel, LinearGaussianModel
from csmc.particles import (
    ParticleEnsemble,
    ess,
    incremental_weight,
    log_ess,
    normalize_log_weights,
    resample,
    resample_indices,
    self_normalized,
)
from csmc.streams import Streams, as_streams

__all__ = [
    "BootstrapProposal",
    "ConfigurationError",
    "Constraint",
    "ConstraintAwareProposal",
    "ConstraintSchedule",
    "CsmcError",
    "DegenerateEnsembleError",
    "DiscreteMarkovModel",
    "DriftedProposal",
    "DynamicModel",
    "EstimatorDegenerateError",
    "EulerMaruyamaModel",
    "FixedPoint",
    "GaussianMarkovModel",
    "InfeasibleError",
    "LinearGaussianModel",
    "ModelError",
    "Observation",
    "ParticleEnsemble",
    "PeisError",
    "Prefix",
    "Proposal",
    "RejectionError",
    "ResamplingPolicy",
    "RunReport",
    "Streams",
    "Subset",
    "Trivial",
    "WeightCollapseError",
    "as_streams",
    "constraint_aware",
    "constraint_log_likelihood",
    "ess",
    "estimate",
    "incremental_weight",
    "log_ess",
    "marginal_means",
    "normalize_log_weights",
    "resample",
    "resample_indices",
    "run_csmc",
    "run_drifted_smc",
    "run_rejection",
    "run_segmental",
    "segmentize",
    "self_normalized",
    "t_plus",
]

__version__ = "0.1.0"
