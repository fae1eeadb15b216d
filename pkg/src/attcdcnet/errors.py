"""Exception hierarchy shared by every module of the package."""


class AttCDCNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AttCDCNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(AttCDCNetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(AttCDCNetError, ValueError):
    """A call violated an operation's precondition."""


class NumericalError(AttCDCNetError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DataError(AttCDCNetError):
    """A dataset could not be read, decoded or split."""


class CheckpointError(AttCDCNetError):
    """Base class for checkpoint persistence failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, truncation or CRC mismatch."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an unsupported format version."""


class CheckpointMismatchError(CheckpointError):
    """Tensor names or shapes do not match the current model."""
