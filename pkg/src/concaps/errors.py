"""Exception types shared across the package."""


class ConcapsError(Exception):
    """Base class for all package-specific errors."""


class ParseError(ConcapsError):
    """A corpus or dictionary file could not be parsed."""


class ValidationError(ConcapsError):
    """Data violates a documented invariant."""


class FormatError(ConcapsError):
    """A binary file (feature cache, checkpoint) has the wrong layout."""


class ConfigError(ConcapsError):
    """A configuration value is out of its legal range or inconsistent."""


class ContractError(ConcapsError):
    """A caller violated a function precondition."""


class TrainingError(ConcapsError):
    """Training aborted (for example on a non-finite loss)."""
