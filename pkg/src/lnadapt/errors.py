"""Exception types shared across the package."""


class LnAdaptError(Exception):
    """Base class for all package errors."""


class ShapeError(LnAdaptError, ValueError):
    """Array dimensions do not line up."""


class ConfigError(LnAdaptError, ValueError):
    """Invalid configuration or precondition."""


class StateError(LnAdaptError, RuntimeError):
    """Operation not allowed in the object's current state."""


class NumericError(LnAdaptError, ArithmeticError):
    """Non-finite values or divergence."""


class DataError(LnAdaptError, ValueError):
    """Input data violates a content requirement."""


class ParseError(LnAdaptError, ValueError):
    """Corrupt or truncated binary file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(LnAdaptError, OSError):
    """A required file is missing or unreadable."""
