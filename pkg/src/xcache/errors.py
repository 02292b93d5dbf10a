"""Exception hierarchy shared across the package."""


class XCacheError(Exception):
    """Base class for all package errors."""


class ShapeError(XCacheError):
    """Operands have incompatible dimensions."""


class ConfigError(XCacheError):
    """Invalid configuration value or run config."""


class DataError(XCacheError):
    """Input data violates a precondition (NaN/Inf, out-of-range tokens)."""


class FormatError(XCacheError):
    """Malformed binary or JSON artifact."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(XCacheError):
    """An iterative method failed to converge."""


class UsageError(XCacheError):
    """An operation was called on a state that does not support it."""
