"""Exception hierarchy shared by every module."""


class XmtcError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(XmtcError):
    """A file could not be parsed. Carries the path and 1-based line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ValidationError(ParseError):
    """Parsed content violates a data-model invariant."""


class ShapeError(XmtcError, ValueError):
    pass


class ConfigError(XmtcError, ValueError):
    pass


class DegenerateInputError(XmtcError, ValueError):
    pass


class EmptyTeacher(XmtcError):
    """No label in the teacher label set has a non-empty description."""


class EmptyTruth(XmtcError):
    """An example has no gold labels; ranking metrics are undefined for it."""


class NumericError(XmtcError, ArithmeticError):
    pass


class CheckpointError(XmtcError):
    pass
