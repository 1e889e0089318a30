from __future__ import annotations

from pathlib import Path


class CrmeError(Exception):
    """Base class for every error raised by the crme package."""


class DomainMismatchError(CrmeError):
    def __init__(self, expected: str, actual: str) -> None:
        super().__init__(f"expected a {expected}-domain map, got {actual}")
        self.expected = expected
        self.actual = actual


class ShapeMismatchError(CrmeError):
    pass


class OutOfBoundsError(CrmeError):
    pass


class ConfigError(CrmeError):
    def __init__(self, message: str, keys: list[str] | None = None) -> None:
        self.keys = list(keys or [])
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class DatasetError(CrmeError):
    pass


class ChecksumError(DatasetError):
    pass


class IngestionError(DatasetError):
    def __init__(self, path: Path, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path


class ImageFormatError(CrmeError):
    pass


class InsufficientSamplesError(CrmeError):
    pass


class UndefinedNormalizationError(CrmeError):
    pass


class ParamsMismatchError(CrmeError):
    pass


class TrainingDivergedError(CrmeError):
    def __init__(self, message: str, checkpoint: Path | None = None) -> None:
        if checkpoint is not None:
            message = f"{message} (diagnostic checkpoint: {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint
