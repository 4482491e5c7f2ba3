"""Exception types shared across the package.

The CLI maps them to exit codes: configuration problems to 1, bad input data
to 2 and numeric failures to 3.
"""


class EmoAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(EmoAdaptError, ValueError):
    pass


class DataError(EmoAdaptError, ValueError):
    """Malformed or inconsistent input data (audio, manifests, caches, checkpoints)."""


class ShapeError(EmoAdaptError, ValueError):
    pass


class NumericError(EmoAdaptError, ArithmeticError):
    """NaN or Inf encountered."""
