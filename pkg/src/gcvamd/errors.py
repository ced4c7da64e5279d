"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a run configuration or network geometry is inconsistent."""


class SingularSystemError(RuntimeError):
    """(I - A^T) is numerically singular; the latent linear solve cannot proceed."""


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite or exploded during training.

    ``component`` names the offending term.
    """

    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        msg = f"training diverged: component {component!r}"
        if value is not None:
            msg += f" = {value!r}"
        super().__init__(msg)


class CheckpointFormatError(RuntimeError):
    """Checkpoint file is malformed, truncated, or from an unknown version."""


class ImageDecodeError(ValueError):
    """An input image file could not be decoded."""
