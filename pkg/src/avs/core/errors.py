"""Exception hierarchy and CLI exit codes."""

from typing import Any, Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class AvsError(Exception):
    """Base class for all avstream errors."""

    exit_code: int = EXIT_VALIDATION


class ConfigValidationError(AvsError, ValueError):
    """Configuration failed validation."""


class ShapeMismatchError(AvsError, ValueError):
    """Two latent blocks or tensors disagree on shape or modality."""


class StaleCacheError(AvsError, ValueError):
    """A condition KV cache no longer matches its tokens or parameters."""


class CheckpointError(AvsError):
    """Checkpoint missing, corrupt or incompatible with the config."""


class ContainerError(AvsError):
    """Binary record container is corrupt or has the wrong magic/version."""


class NumericalAbort(AvsError):
    """Non-finite loss or gradient; training step aborted."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"
