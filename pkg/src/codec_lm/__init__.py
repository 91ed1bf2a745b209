"""Desk-scale conditional codec language modeling for zero-shot TTS."""

from .errors import ConfigError, OptimizerError, UsageError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "OptimizerError",
    "UsageError",
    "ValidationError",
    "__version__",
]
