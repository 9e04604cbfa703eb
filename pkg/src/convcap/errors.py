"""Exception types shared across the package."""


class ConvCapError(Exception):
    """Base class for all errors raised by convcap."""


class DimensionError(ConvCapError, ValueError):
    """Operand shapes are incompatible."""


class TokenIndexError(ConvCapError, IndexError):
    """A token/row id falls outside the table."""


class ConfigurationError(ConvCapError, ValueError):
    """An invalid combination of settings."""


class InputError(ConvCapError, ValueError):
    """Empty or malformed user-supplied input."""


class FormatError(ConvCapError, ValueError):
    """A binary or text file does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ConvCapError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
