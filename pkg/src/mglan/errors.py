"""Exception hierarchy shared across the package."""


class MglanError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(MglanError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(DomainError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(MglanError, ValueError):
    """A configuration is inconsistent with the data it is applied to."""


class DataFormatError(MglanError, ValueError):
    """Input files do not follow the expected format."""


class StaleArtifactError(MglanError):
    """A chained artifact no longer matches the hash recorded upstream."""
