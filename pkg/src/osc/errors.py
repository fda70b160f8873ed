"""Exception hierarchy shared by every module."""


class OSCError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(OSCError, ValueError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    def __init__(self, flat_index: int, value: float):
        super().__init__(f"non-finite value {value!r} at flat index {flat_index}")
        self.flat_index = flat_index


class FormatError(ValidationError):
    """Malformed tensor or table file."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFinitePayloadError(FormatError):
    pass


class DecodeError(ValidationError):
    """Element code bit pattern is not a valid member of the format."""
