from __future__ import annotations

from pathlib import Path


class ArbInpaintError(Exception):
    pass


class ValidationError(ArbInpaintError, ValueError):
    """Input violates a documented precondition (shape, range, binary mask, ...)."""


class ConfigError(ValidationError):
    pass


class CapabilityError(ValidationError):
    """A model cannot consume the input shape an adapter mode hands it."""


class MaskGenerationError(ArbInpaintError):
    pass


class TrainingAbortError(ArbInpaintError):
    def __init__(self, message: str, part: str | None = None, last_checkpoint: Path | None = None):
        self.reason = message
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
        self.part = part
        self.last_checkpoint = last_checkpoint


class CheckpointError(ArbInpaintError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass
