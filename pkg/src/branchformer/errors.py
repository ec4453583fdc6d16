"""Exception hierarchy shared across the package."""


class BranchformerError(Exception):
    """Base class; the CLI turns any of these into a one-line error record."""

    code = "error"


class ShapeError(BranchformerError, ValueError):
    code = "shape"


class ConfigError(BranchformerError, ValueError):
    code = "config"


class ContractError(BranchformerError, ValueError):
    code = "contract"


class CheckpointError(BranchformerError):
    code = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint_version"


class CheckpointTruncatedError(CheckpointError):
    code = "checkpoint_truncated"


class CheckpointCorruptError(CheckpointError):
    code = "checkpoint_corrupt"


class CheckpointShapeError(CheckpointError):
    code = "checkpoint_shape"


class TrainingDiverged(BranchformerError):
    code = "diverged"


class BenchmarkError(BranchformerError):
    code = "bench"
