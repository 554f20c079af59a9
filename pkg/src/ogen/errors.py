"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/validation
errors exit 2, numerical failures exit 3.
"""


class DataError(ValueError):
    """Malformed or invalid input data (files, datasets, splits)."""


class ConfigError(ValueError):
    """Inconsistent or out-of-range configuration."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values; carries diagnostics."""
