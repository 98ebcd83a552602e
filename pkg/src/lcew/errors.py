class LCEWError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(LCEWError):
    """Input file or config does not follow the expected layout."""


class DataError(LCEWError):
    """Input values violate a data invariant."""


class InsufficientSamplesError(LCEWError):
    """Too few samples for a statistical estimate."""


class TrainingDiverged(LCEWError):
    """Raised when the training loss becomes non-finite.

    Carries the last parameters that produced a finite loss.
    """

    def __init__(self, message, params=None, report=None):
        super().__init__(message)
        self.params = params
        self.report = report
