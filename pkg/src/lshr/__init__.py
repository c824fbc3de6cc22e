"""Learned binary sensing patterns with low-resolution sensing and high-resolution reconstruction."""

from .errors import (
    ADCRangeError,
    ConfigurationError,
    CorruptFileError,
    DimensionError,
    DuplicateEntryError,
    IncompleteFrameError,
    LSHRError,
    NonFiniteError,
    UsageError,
)
from .network import NetworkConfig, forward, init_params, kernel_count, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ADCRangeError",
    "ConfigurationError",
    "CorruptFileError",
    "DimensionError",
    "DuplicateEntryError",
    "IncompleteFrameError",
    "LSHRError",
    "NetworkConfig",
    "NonFiniteError",
    "TrainConfig",
    "UsageError",
    "forward",
    "init_params",
    "kernel_count",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
