"""Exception hierarchy shared across the package."""


class RbdetError(Exception):
    """Base class for all package errors."""


class TensorError(RbdetError):
    """Shape, dtype or graph misuse in tensor operations."""


class FusionError(RbdetError):
    """Branch fusion attempted on a block that is not ready for it."""


class CheckpointError(RbdetError):
    """Checkpoint file is malformed or incompatible with the model."""


class DataError(RbdetError):
    """Dataset files are missing, malformed or inconsistent."""


class NumericError(RbdetError):
    """Training produced a non-finite loss or other numeric failure."""
