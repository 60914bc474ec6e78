class PGSAMError(Exception):
    """Base class for package errors."""


class ValidationError(PGSAMError, ValueError):
    """Input failed a shape, range or content check."""


class ConfigurationError(PGSAMError, ValueError):
    """A configuration cannot be realised."""


class DatasetIndexError(PGSAMError):
    """The dataset layout on disk is incomplete or inconsistent."""


class ProviderError(PGSAMError, RuntimeError):
    """A text-embedding provider could not produce an embedding."""


class TrainingDivergedError(PGSAMError, RuntimeError):
    """A non-finite loss was produced during training."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class CheckpointMismatchError(PGSAMError):
    """A checkpoint is incompatible with the requested evaluation."""
