"""Exception taxonomy shared across the package."""


class Tab2ImgError(Exception):
    """Base class for all package errors."""


class ShapeError(Tab2ImgError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(Tab2ImgError, ValueError):
    """A configuration value is out of its supported range."""


class DataError(Tab2ImgError, ValueError):
    """Dataset content violates a precondition (labels, emptiness, ...)."""


class FormatError(Tab2ImgError, ValueError):
    """A file does not follow its declared on-disk format."""


class FetchError(Tab2ImgError, RuntimeError):
    """A remote dataset could not be retrieved or failed verification."""


class UsageError(Tab2ImgError, ValueError):
    """An API was called in an unsupported way."""


class TrainingDiverged(Tab2ImgError, RuntimeError):
    """Training produced non-finite values and was aborted."""
