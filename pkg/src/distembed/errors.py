"""Exception types shared across the package."""


class DistembedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DistembedError):
    """A spec/config object is invalid. Message names the offending field."""


class NumericError(DistembedError):
    """A numerical precondition was violated (non-PSD matrix, NaN loss, ...)."""


class InsufficientDataError(DistembedError):
    """Too few points for the requested fit."""


class FitError(DistembedError):
    """An iterative fit failed after all restarts."""


class TrainingError(DistembedError):
    """Training aborted; carries the step context in the message."""
