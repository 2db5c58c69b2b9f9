"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration and format
problems exit 2, missing upstream artifacts exit 3, numerical failures
exit 4.
"""


class LdganError(Exception):
    """Base class for all package errors."""


class ShapeError(LdganError, ValueError):
    """Operands have incompatible shapes; message reports both."""


class ConfigError(LdganError, ValueError):
    """Invalid configuration value or precondition violation."""


class FormatError(LdganError, ValueError):
    """Malformed serialized artifact (bad magic, truncation, size lies)."""


class DependencyError(LdganError, RuntimeError):
    """A required upstream artifact is missing."""


class TrainingError(LdganError, RuntimeError):
    """Training diverged (non-finite loss); message carries the epoch."""


class DegeneracyError(LdganError, ValueError):
    """Data is rank-deficient for the requested decomposition."""


class DomainError(LdganError, ValueError):
    """Argument outside the mathematical domain of the operation."""
