"""Exception hierarchy shared across the package.

Every error raised by the library derives from :class:`ReservoirTTAError`
so callers can catch the whole family with one clause. The CLI maps these
onto its exit-code contract (1 = configuration, 2 = I/O, 3 = verification).
"""


class ReservoirTTAError(Exception):
    """Base class for all library errors."""


class InputDomainError(ReservoirTTAError):
    """An argument is outside the operation's domain (shape, range, finiteness)."""


class DegenerateBatchError(InputDomainError):
    """A batch is too small to carry the statistic being computed."""


class InsufficientDataError(ReservoirTTAError):
    """An operation needs more data than it was given."""


class StyleFileFormatError(ReservoirTTAError):
    """A style file does not conform to the documented text format."""


class NumericalError(ReservoirTTAError):
    """A computation produced non-finite values."""


class ConfigurationError(ReservoirTTAError):
    """A configuration value violates a documented precondition."""


class GenerationError(ReservoirTTAError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingError(ReservoirTTAError):
    """Source training diverged."""


class EndOfStream(ReservoirTTAError):
    """Requested a batch past the end of a domain stream."""
