"""Exception hierarchy shared across the package."""


class EntropySSLError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(EntropySSLError, ValueError):
    pass


class InsufficientDataError(EntropySSLError, ValueError):
    pass


class UndefinedScoreError(EntropySSLError, ValueError):
    """A metric was requested on a set for which it is not defined."""


class InvalidComparisonError(EntropySSLError, ValueError):
    pass


class ConfigError(EntropySSLError, ValueError):
    pass


class InternalConsistencyError(EntropySSLError, RuntimeError):
    pass


class DivergedTrainingError(EntropySSLError, RuntimeError):
    """Raised when a loss becomes non-finite.

    ``batch_index`` is the index of the offending batch within the epoch,
    or ``None`` when the failure was not tied to a batch.
    """

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
