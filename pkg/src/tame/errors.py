"""Exception hierarchy shared across the package."""


class TameError(Exception):
    """Base class for all package errors."""


class ShapeError(TameError, ValueError):
    """Operand shapes are inconsistent; the message names the offending axes."""


class DomainError(TameError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NumericError(TameError, FloatingPointError):
    """A computation produced NaN/Inf or diverged."""


class GraphError(TameError, RuntimeError):
    """Backward was requested on a tensor that is not connected to any gradient."""


class ConfigError(TameError, ValueError):
    """Invalid or inconsistent configuration."""


class DigestMismatch(ConfigError):
    """An artifact was produced under a different configuration or dataset."""


class FormatError(TameError, ValueError):
    """A file does not follow the expected on-disk format."""
