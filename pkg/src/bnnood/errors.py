"""Exception types shared across the package."""


class BnnoodError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BnnoodError, ValueError):
    """Shapes, dimensions or settings that do not fit together."""


class DomainError(BnnoodError, ValueError):
    """An operand is outside the domain of the requested operation."""


class UsageError(BnnoodError, ValueError):
    """An API was called in a way its contract forbids."""


class FormatError(BnnoodError, ValueError):
    """A file on disk does not follow the expected binary or text layout."""


class TrainingAbort(BnnoodError, RuntimeError):
    """Optimization produced a non-finite objective."""

    def __init__(self, message, step=None, lr=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
