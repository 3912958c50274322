"""Exception types shared across the package."""


class MvixError(Exception):
    """Base class for all package errors."""


class DimensionError(MvixError):
    """Vector or matrix shapes do not match."""


class DuplicateIdError(MvixError):
    """A document id occurs more than once in a store."""


class NormalizationError(MvixError):
    """A token vector is not unit-normalized."""


class FormatError(MvixError):
    """A file does not start with the expected magic/version."""


class CorruptionError(MvixError):
    """A file is truncated or internally inconsistent."""


class ConfigError(MvixError):
    """Invalid or inconsistent configuration."""


class ConvergenceError(MvixError):
    """The gate solver failed to converge.

    The offending solver result is attached for diagnosis.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class MissingQrelsError(MvixError):
    """A query has no relevance judgments."""


class InsufficientDataError(MvixError):
    """Not enough annotated examples for the requested protocol."""


class NumericalError(MvixError):
    """A non-finite value appeared during optimization."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
