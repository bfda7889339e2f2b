"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``NumericError`` -> 3.
"""


class IssueFrameError(Exception):
    """Base class for all library errors."""


class ConfigError(IssueFrameError, ValueError):
    """Invalid configuration or option value."""


class ShapeError(IssueFrameError, ValueError):
    """Operand shapes do not fit together."""


class TapeStateError(IssueFrameError, RuntimeError):
    """Backward requested on a tape that cannot run it."""


class NumericError(IssueFrameError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(IssueFrameError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class LabelError(DataError):
    """A label is outside the label set it must belong to."""


class EmptyDatasetError(DataError):
    pass


class AnnotationError(DataError):
    pass


class BalanceError(DataError):
    pass


class FeatureError(DataError):
    pass


class AlignmentError(DataError):
    """Two sequences that must be aligned have different lengths."""


class UndefinedKappaError(DataError):
    """Chance agreement is 1, so Cohen's kappa is 0/0."""
