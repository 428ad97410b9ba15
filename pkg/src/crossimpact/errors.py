"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad or inconsistent
inputs, CLI exit code 2) and :class:`NumericalError` (a computation could not
be carried out, CLI exit code 3).
"""


class CrossImpactError(Exception):
    """Base class for all package errors."""


class DataError(CrossImpactError):
    pass


class NumericalError(CrossImpactError):
    pass


# linear algebra
class NotSymmetric(NumericalError):
    pass


class IndefiniteInput(NumericalError):
    pass


class ZeroMatrix(NumericalError):
    pass


class ZeroBasis(NumericalError):
    pass


class DimensionMismatch(DataError):
    pass


# instruments
class ExpiredInstrument(DataError):
    pass


class NegativeVol(NumericalError):
    pass


class FiniteDifferenceFailure(NumericalError):
    pass


class RankDeficientLoadings(NumericalError):
    pass


# kyle / zoo
class NotInKernel(NumericalError):
    pass


class UnsupportedUniverse(DataError):
    pass


class NonPositiveLiquidity(NumericalError):
    pass


# simulation / estimation / evaluation
class StateInvalid(NumericalError):
    def __init__(self, message: str, bar_index: int | None = None):
        super().__init__(message)
        self.bar_index = bar_index


class InsufficientData(DataError):
    pass


class ColumnMismatch(DataError):
    pass


class SurfaceFitFailure(NumericalError):
    def __init__(self, message: str, bar_index: int | None = None):
        super().__init__(message)
        self.bar_index = bar_index


class MissingCoordinate(DataError):
    pass


class ZeroDenominator(NumericalError):
    pass


class DegenerateFlow(NumericalError):
    pass
