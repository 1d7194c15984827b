"""Exception types shared across the package."""


class CrossviewError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CrossviewError, ValueError):
    """Tensor/network shapes do not line up; message names both shapes."""


class DomainError(CrossviewError, ValueError):
    """A value lies outside an operation's documented domain."""


class ContractError(CrossviewError, RuntimeError):
    """An API was used in a way its contract forbids."""


class ParseError(CrossviewError, ValueError):
    """A file could not be parsed; message carries the line number."""


class FormatError(CrossviewError, ValueError):
    """A file parsed but its contents violate the documented format."""


class TrainingError(CrossviewError, RuntimeError):
    """Training aborted (non-finite loss or gradient); message carries diagnostics."""


class ConfigError(CrossviewError, ValueError):
    """A run configuration failed validation."""
