"""Exception types shared across the package."""


class DiffActError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffActError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigurationError(DiffActError, ValueError):
    """A configuration value or combination of values is invalid."""


class TrainingError(DiffActError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class DataError(DiffActError, ValueError):
    """Malformed, empty, or corrupt dataset or checkpoint content."""
