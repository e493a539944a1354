"""Exception and warning types shared across the package."""


class KVQError(Exception):
    """Base class for package errors."""


class DimensionError(KVQError, ValueError):
    """Shapes are incompatible with the requested operation."""


class ContractError(KVQError, ValueError):
    """A documented precondition was violated (bad index, non-scalar loss, ...)."""


class ConfigError(KVQError, ValueError):
    """A configuration value is invalid."""


class UndefinedMetricError(KVQError, ValueError):
    """A metric is mathematically undefined for the given input (e.g. zero variance)."""


class CoverageError(KVQError, ValueError):
    """Predictions do not cover every annotated item."""


class ValidationError(KVQError, ValueError):
    """Input file failed validation.

    ``row`` is the 1-based data row number (header excluded) when known.
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DegenerateInputWarning(UserWarning):
    """A loss was evaluated on degenerate input and returned its fallback value."""
