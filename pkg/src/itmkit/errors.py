"""Exception types shared across the package."""


class ItmError(Exception):
    """Base class for errors raised by itmkit."""


class ShapeError(ItmError, ValueError):
    """Raised when tensor or image shapes are incompatible.

    ``dim`` names the offending dimension (or stage) when known.
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class GradientError(ItmError, FloatingPointError):
    """Raised when a gradient or loss is not finite."""


class FormatError(ItmError, ValueError):
    """Raised by codecs on malformed input. ``offset`` is a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ItmError, ValueError):
    """Raised on invalid configuration documents or values."""
