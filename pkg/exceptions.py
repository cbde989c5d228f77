"""
Error hierarchy for the RUL robustness toolkit.

Every failure the toolkit raises on purpose derives from RobustPdMError so the
CLI can map it to an exit code with a contextual message.
"""

from typing import Iterable, Optional


class RobustPdMError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(RobustPdMError, ValueError):
    """Invalid configuration: unknown keys, bad specs, shape mismatches."""


class UsageError(RobustPdMError, ValueError):
    """An operation was called outside its precondition."""


class DataParseError(RobustPdMError):
    """Malformed dataset file."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CheckpointError(RobustPdMError):
    """Base class for checkpoint and container problems."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated, not a container, or misses required entries."""


class CheckpointVersionError(CheckpointError):
    """Container was written with an unsupported format version."""


class SpecMismatchError(CheckpointError):
    """Checkpoint holds a different architecture than the caller expects."""


class TrainingDivergedError(RobustPdMError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch: int, learning_rate: float, stage: str = "training"):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(
            f"{stage} diverged at epoch {epoch} (non-finite loss) with "
            f"learning_rate={learning_rate:g}; retry with a smaller learning rate, "
            f"e.g. {learning_rate / 10:g}"
        )


class MissingArtifactError(RobustPdMError):
    """Required run artifacts are absent and building them is disabled."""

    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(missing)
        super().__init__(
            "missing artifacts (rerun without --no-build to create them): "
            + ", ".join(self.missing)
        )
