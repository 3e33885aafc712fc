"""Exception types shared across the package."""


class LacuneSegError(Exception):
    """Base class for all package errors."""


class VolumeLoadError(LacuneSegError):
    """A volume file is missing, unparsable, or fails validation."""


class GeometryMismatchError(LacuneSegError):
    """Shapes, spacings, or grids that must agree do not."""


class NonBinaryMaskError(LacuneSegError):
    """A mask contains values outside {0, 1}."""


class DegenerateVolumeError(LacuneSegError):
    """A volume cannot be normalized (constant or too small)."""


class RegistrationError(LacuneSegError):
    """External registration failed or its artifacts are missing."""


class EmptyDatasetError(LacuneSegError):
    """A training set has no usable samples (or only one class)."""


class TrainingDivergedError(LacuneSegError):
    """Training produced a non-finite loss."""


class ConfigError(LacuneSegError):
    """A config file or config value is invalid."""


class PipelineStageError(LacuneSegError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, original):
        self.stage = stage
        self.original = original
        super().__init__(f"stage '{stage}': {original}")
