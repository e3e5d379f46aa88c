"""Exception hierarchy. Every error carries a stable machine-readable code
so CLI output and tests can match on it without parsing messages."""

from __future__ import annotations


class NiromError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


class CorruptHeaderError(NiromError):
    code = "corrupt_header"


class DimensionMismatchError(NiromError):
    code = "dimension_mismatch"


class NonMonotoneTimesError(NiromError):
    code = "non_monotone_times"


class NonFiniteValuesError(NiromError):
    code = "non_finite_values"


class EmptySnapshotSetError(NiromError):
    code = "empty_snapshot_set"


class LayoutMismatchError(NiromError):
    code = "layout_mismatch"


class SnapshotIOError(NiromError):
    code = "io_failure"


class InvalidSpecError(NiromError):
    code = "invalid_spec"


class DegenerateDataError(NiromError):
    code = "degenerate_data"


class RankRangeError(NiromError):
    code = "rank_out_of_range"


class DataRangeError(NiromError):
    """Training data lies outside the interval demanded by an activation."""

    code = "data_out_of_range"


class SolverError(NiromError):
    """ODE/stepping failure: step underflow, step budget, non-finite state."""

    code = "solver_failure"


class TrainingDivergedError(NiromError):
    """Raised when a training loss or gradient goes non-finite.

    ``history`` holds the per-epoch records accumulated before the abort.
    """

    code = "training_diverged"

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class SingularSystemError(NiromError):
    code = "singular_system"


class ConvergenceError(NiromError):
    code = "convergence_failure"


class NonUniformTimesError(NiromError):
    code = "non_uniform_times"


class ZeroNormError(NiromError):
    code = "zero_norm"


class WindowMismatchError(NiromError):
    code = "window_mismatch"


class PipelineStageError(NiromError):
    """Wraps a failure with the pipeline stage it occurred in."""

    code = "stage_failure"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, NiromError):
            self.code = cause.code
