"""Exception hierarchy shared by all pipeline stages."""


class SentinelError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(SentinelError):
    pass


class InvalidConfig(SentinelError):
    pass


class InvalidState(SentinelError):
    pass


class NumericError(SentinelError):
    pass


class FormatError(SentinelError):
    """Malformed binary container (bad magic, truncation, wrong shape)."""


class DataError(SentinelError):
    """Well-formed container holding unusable values (NaN/inf)."""


class InsufficientData(SentinelError):
    pass


class MissingDecoder(SentinelError):
    pass


class InjectionInfeasible(SentinelError):
    pass


class UndefinedMetric(SentinelError):
    """Raised when a rate has an empty denominator (no clean or no anomalous samples)."""


class StageError(SentinelError):
    """Experiment stage failure; carries the stage name and whatever was computed so far."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial
