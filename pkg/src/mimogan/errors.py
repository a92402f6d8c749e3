"""Exception hierarchy for mimogan."""

from pathlib import Path
from typing import Optional, Union


class MimoGanError(Exception):
    """Base class for every error raised by mimogan."""


class ContractViolationError(MimoGanError, ValueError):
    """Shapes, dimensions or other preconditions do not match."""


class NumericError(MimoGanError, ArithmeticError):
    """A value that must be finite is NaN or infinite."""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        super().__init__(f"{message} (in {where})" if where else message)


class DivergenceError(NumericError):
    """Training diverged (critic loss magnitude beyond the abort threshold)."""


class ConfigurationError(MimoGanError, ValueError):
    """Invalid channel, run or benchmark configuration."""


class UsageError(MimoGanError, RuntimeError):
    """An API was called in the wrong order or state."""


class UndefinedStatisticsError(MimoGanError, ValueError):
    """Statistics requested for a profile that carries no power."""


class ContainerError(MimoGanError):
    """A binary container file could not be read."""

    def __init__(self, message: str, path: Union[str, Path, None] = None):
        self.path = Path(path) if path is not None else None
        super().__init__(f"{path}: {message}" if path is not None else message)


class BadMagicError(ContainerError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(ContainerError):
    """The container was written by an unsupported format version."""


class TruncatedFileError(ContainerError):
    """The file ends before a declared section does."""


class ChecksumError(ContainerError):
    """A section's CRC32 does not match its contents."""
