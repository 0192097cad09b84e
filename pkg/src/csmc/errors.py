"""Exception types raised by the library."""


class CsmcError(Exception):
    """Base class for all library errors."""


class DegenerateEnsembleError(CsmcError):
    """All priority scores (or all weights) are zero."""


class WeightCollapseError(DegenerateEnsembleError):
    """Every particle has been killed during a run."""

    def __init__(self, time: int, message: str | None = None):
        self.time = time
        super().__init__(message or f"total weight collapse at t={time}")


class ModelError(CsmcError):
    """A model density evaluated to NaN or +inf."""


class ConfigurationError(CsmcError):
    """Inconsistent engine inputs (e.g. estimator missing at a resampling time)."""


class EstimatorDegenerateError(CsmcError):
    """Pilot runs produced no usable information for a segment."""

    def __init__(self, segment: tuple[int, int], message: str | None = None):
        self.segment = segment
        super().__init__(message or f"estimator degenerate on segment ({segment[0]}, {segment[1]}]")


class PeisError(CsmcError):
    """The weighted least-squares step of PEIS could not be solved."""


class InfeasibleError(CsmcError):
    """No path with finite score exists."""


class RejectionError(CsmcError):
    """The rejection sampler accepted nothing."""

    def __init__(self, attempts: int):
        self.attempts = attempts
        super().__init__(f"no acceptances in {attempts} attempts")
