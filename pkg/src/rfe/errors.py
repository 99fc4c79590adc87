"""Exception types raised across the package."""


class RFEError(Exception):
    """Base class for all package errors."""


class DimensionError(RFEError, ValueError):
    pass


class NonFiniteError(RFEError, FloatingPointError):
    pass


class InvalidTargetError(RFEError, ValueError):
    pass


class EmptySupportError(RFEError, ValueError):
    pass


class MissingHeadError(RFEError, KeyError):
    pass


class ConfigError(RFEError, ValueError):
    pass


class DivergenceError(RFEError, FloatingPointError):
    pass


class SequencingError(RFEError, RuntimeError):
    pass


class TaskRangeError(RFEError, IndexError):
    pass


class MissingEntryError(RFEError, KeyError):
    pass


class MissingStateError(RFEError, KeyError):
    pass


class DegenerateSpectrumError(RFEError, ValueError):
    pass


class ParseError(RFEError, ValueError):
    """Malformed binary container; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
