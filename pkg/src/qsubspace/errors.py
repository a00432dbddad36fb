"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, FormatError -> 4.
"""


class QsubError(Exception):
    """Base class for package errors."""


class ConfigError(QsubError):
    """Invalid configuration, parameters, or argument combinations."""


class NumericError(QsubError):
    """Numerical failure: divergence, non-convergence, non-finite values."""


class FormatError(QsubError):
    """Malformed on-disk data (array container, config file, checkpoint)."""
