"""Exception hierarchy shared by all gdfolio modules."""


class GdfolioError(Exception):
    """Base class for every error raised by this package."""


class EvaluationError(GdfolioError):
    """A graph node produced a non-finite or undefined value."""


class UsageError(GdfolioError):
    """The tape API was called out of order (e.g. backward before forward)."""


class ShapeError(GdfolioError, ValueError):
    """Operand lengths or matrix dimensions do not line up."""


class ConfigError(GdfolioError, ValueError):
    """Invalid loss specification, training configuration or scenario file."""


class IngestionError(GdfolioError, ValueError):
    """A price/return file could not be turned into a valid panel."""


class TrainingError(GdfolioError):
    """Training diverged; carries the epoch and the per-term breakdown."""

    def __init__(self, message, epoch=None, terms=None):
        super().__init__(message)
        self.epoch = epoch
        self.terms = dict(terms or {})


class EnumerationError(GdfolioError):
    """The simplex grid is too large to enumerate."""
