"""Exception types shared across the package."""


class LSHRError(Exception):
    """Base class for all package errors."""


class DimensionError(LSHRError, ValueError):
    """Tensor or image shapes do not fit the operation."""


class UsageError(LSHRError, RuntimeError):
    """An API was called in a state where it cannot work."""


class ConfigurationError(LSHRError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class NonFiniteError(LSHRError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class CorruptFileError(LSHRError, IOError):
    """A file failed header or checksum validation."""


class IncompleteFrameError(LSHRError, ValueError):
    """A measurement frame does not cover every (pattern, block) cell."""


class DuplicateEntryError(LSHRError, ValueError):
    """A (pattern, block) cell appears more than once in a frame."""


class ADCRangeError(LSHRError, ValueError):
    """An ADC count lies outside the converter range."""
