"""Exception types shared across the package."""


class EvactError(Exception):
    """Base class for all package errors."""


class FormatError(EvactError):
    """A file does not match the declared on-disk format."""


class ValidationError(EvactError, ValueError):
    """Input violates a documented precondition.

    ``index`` carries the offending record position when one applies.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class IoError(EvactError, OSError):
    pass


class DegenerateSplit(EvactError):
    pass


class ShapeError(EvactError, ValueError):
    pass


class DegenerateStd(EvactError, ArithmeticError):
    pass


class StateError(EvactError, RuntimeError):
    pass


class VocabError(EvactError, KeyError):
    pass


class TrainingDiverged(EvactError, RuntimeError):
    """Loss became non-finite; ``last_finite_step`` is the last good step (-1 if none)."""

    def __init__(self, message, last_finite_step=-1):
        super().__init__(message)
        self.last_finite_step = last_finite_step
