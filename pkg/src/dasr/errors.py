class DasrError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(DasrError, ValueError):
    """An operation received data violating its preconditions."""


class ConfigurationError(DasrError):
    """Pipeline configuration inconsistent with the input data."""


class InsufficientDecayError(DasrError):
    """Energy decay curve does not span the range needed for a fit."""


class UnattributableError(DasrError):
    """No word could be anchored to a diarized speaker."""


class UndefinedRateError(DasrError):
    """Error rate requested against a reference with zero words.

    The computed counts are still available on ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class AsrError(DasrError):
    """The ASR backend failed to transcribe a stream."""
