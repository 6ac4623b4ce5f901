"""Exception hierarchy shared across the package."""


class MDNetError(Exception):
    """Base class for all package errors."""


class ConfigError(MDNetError, ValueError):
    """Invalid configuration value or inconsistent channel wiring."""


class ShapeError(MDNetError, ValueError):
    """Tensor shape or stride violates a block contract."""


class ImportWeightsError(MDNetError):
    """Weight archive does not match the model's parameter registry."""


class CorruptArchiveError(MDNetError):
    """Checkpoint archive is truncated, damaged or malformed."""


class ArchiveVersionError(MDNetError):
    """Checkpoint archive was written by an unsupported format version."""


class TrainingDivergedError(MDNetError, RuntimeError):
    """Loss became non-finite during training."""


class DataError(MDNetError):
    """Unreadable, inconsistent or missing input data."""
