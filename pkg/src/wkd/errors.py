"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs (CLI exit code 1);
``NumericalError`` subclasses signal a numerical failure (exit code 2).
"""


class WKDError(Exception):
    pass


class ValidationError(WKDError, ValueError):
    pass


class NumericalError(WKDError, ArithmeticError):
    pass


class NonSymmetric(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class SizeMismatch(ValidationError):
    pass


DimensionMismatch = SizeMismatch


class ShapeMismatch(ValidationError):
    pass


class StaleForward(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class MissingRun(ValidationError):
    pass


class ZeroNormPrototype(ValidationError):
    pass


class DegenerateMedian(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NegativeSpectrum(NumericalError):
    pass


class NumericalBlowup(NumericalError):
    pass
