"""Exception types raised across the package."""


class PoseMatchError(Exception):
    """Base class for all errors raised by pose_match."""

    code = "error"


class DegenerateInput(PoseMatchError, ValueError):
    code = "degenerate_input"


class BehindCamera(PoseMatchError, ValueError):
    code = "behind_camera"


class InvalidCount(PoseMatchError, ValueError):
    code = "invalid_count"


class EmptyBank(PoseMatchError, ValueError):
    code = "empty_bank"


class EmptyPatches(PoseMatchError, ValueError):
    code = "empty_patches"


class UnscoredRecord(PoseMatchError, ValueError):
    code = "unscored_record"


class ShapeMismatch(PoseMatchError, ValueError):
    code = "shape_mismatch"


class InvalidTemperature(PoseMatchError, ValueError):
    code = "invalid_temperature"


class InsufficientCorrespondence(PoseMatchError, RuntimeError):
    code = "insufficient_correspondence"


class AllBackground(InsufficientCorrespondence):
    code = "all_background"


class RetryExhausted(InsufficientCorrespondence):
    code = "retry_exhausted"


class EmptyHypotheses(PoseMatchError, ValueError):
    code = "empty_hypotheses"


class IndexOutOfRange(PoseMatchError, IndexError):
    code = "index_out_of_range"


class CorruptFile(PoseMatchError, ValueError):
    code = "corrupt_file"


class TooFewPoints(PoseMatchError, ValueError):
    code = "too_few_points"


class NonConvergenceWarning(RuntimeWarning):
    """Emitted when Sinkhorn marginals miss their tolerance after the last iteration."""
