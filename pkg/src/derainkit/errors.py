"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: usage/config problems -> 1,
data problems -> 2, numeric failures -> 3.
"""


class DerainError(Exception):
    """Base class for all package errors."""


class ShapeError(DerainError):
    """Operands have incompatible or unsupported shapes."""


class ConfigError(DerainError):
    """Invalid configuration value or unparseable config file."""

    def __init__(self, message, path=None, line=None):
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class DataError(DerainError):
    """Missing, unreadable, or inconsistent data on disk."""


class CheckpointError(DataError):
    """Checkpoint manifest and blobs disagree, or config does not match."""


class NumericError(DerainError):
    """Non-finite values or a failed numeric invariant at runtime."""
