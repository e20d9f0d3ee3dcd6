"""Exception hierarchy shared by all modules."""


class SubnetLaplaceError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(SubnetLaplaceError):
    pass


class NotPositiveDefinite(SubnetLaplaceError):
    """Factorization failed even after the maximum allowed jitter.

    Carries the last jitter attempted so callers can report it.
    """

    def __init__(self, message, jitter_attempted=0.0):
        super().__init__(message)
        self.jitter_attempted = jitter_attempted


class NotPSD(SubnetLaplaceError):
    pass


class NonPositiveDiagonal(SubnetLaplaceError):
    pass


class InvalidNoiseVariance(SubnetLaplaceError):
    pass


class InvalidSize(SubnetLaplaceError):
    pass


class MissingCurvature(SubnetLaplaceError):
    pass


class TaskMismatch(SubnetLaplaceError):
    pass


class IndexMapMismatch(SubnetLaplaceError):
    pass


class EmptyDataset(SubnetLaplaceError):
    pass


class EmptyValidation(SubnetLaplaceError):
    pass


class DivergedTraining(SubnetLaplaceError):
    pass


class TooFewPoints(SubnetLaplaceError):
    pass


class ParseError(SubnetLaplaceError):
    """CSV parse failure; names the offending row and column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class MissingColumn(SubnetLaplaceError):
    pass
