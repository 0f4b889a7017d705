"""Exception types shared across the package."""


class InklError(Exception):
    """Base class for package errors."""


class ShapeError(InklError, ValueError):
    """Tensor shapes are incompatible."""


class StateError(InklError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class NumericError(InklError, FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class ConfigError(InklError, ValueError):
    """Invalid configuration value or file."""


class FormatError(InklError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """Trailing CRC32 does not match the payload."""


class ArgumentError(InklError, ValueError):
    """A function argument is outside its documented domain."""
