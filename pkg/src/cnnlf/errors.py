"""Exception types shared across the package."""


class CnnlfError(Exception):
    """Base class for all package errors."""


class ShapeError(CnnlfError, ValueError):
    """A tensor dimension does not match what an operation requires.

    The message always names the offending dimensions.
    """


class DataError(CnnlfError, ValueError):
    """Invalid pixel values, QP out of range, malformed image files."""


class ConfigError(CnnlfError, ValueError):
    """Inconsistent or incomplete configuration."""


class NonFiniteLossError(CnnlfError, ArithmeticError):
    """A loss term became NaN or infinite; the message names the term."""


class ModelFormatError(CnnlfError, ValueError):
    """Corrupt, truncated or incompatible model / conformance file.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class VerificationError(CnnlfError, AssertionError):
    """A conformance replay produced output that differs from the stored vector."""
