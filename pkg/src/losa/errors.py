"""Exception hierarchy shared across the package."""


class LosaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LosaError, ValueError):
    pass


class EmptyInputError(LosaError, ValueError):
    pass


class ConfigError(LosaError, ValueError):
    pass


class StateError(LosaError, RuntimeError):
    pass


class ReportError(LosaError, ValueError):
    pass


class InvariantError(LosaError, AssertionError):
    """An internal invariant guard failed; the message names the invariant."""


class TraceFormatError(LosaError, ValueError):
    """Malformed trace file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
