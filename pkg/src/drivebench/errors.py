"""Exception types shared across the package."""


class DrivebenchError(Exception):
    """Base class for all package errors."""


class ConfigError(DrivebenchError):
    """Invalid configuration value or file."""


class InvalidFraction(ConfigError):
    """Split fraction outside (0, 1) or seen-style count out of range."""


class DatasetError(DrivebenchError):
    """Dataset missing, unreadable, or failed validation."""


class MissingDataset(DatasetError):
    """A command needs a dataset that has not been generated."""


class GenerationFailed(DatasetError):
    """Scenario rejection-sampling retry budget exhausted."""


class SchemaVersionMismatch(DatasetError):
    """Serialized file carries an unsupported schema version."""


class ValidationError(DatasetError):
    """Deserialized object violates a type invariant."""


class NumericError(DrivebenchError):
    """Non-finite value detected in a numeric pipeline."""


class HorizonExceedsData(ValueError, DrivebenchError):
    """Requested resample horizon is longer than the trajectory."""


class TrajectoryTooShort(ValueError, DrivebenchError):
    """Operation needs more waypoints than the trajectory has."""


class HorizonMismatch(ValueError, DrivebenchError):
    """Plan horizon exceeds the scenario's expert horizon."""


class NonPositiveGap(ValueError, DrivebenchError):
    """Car-following gap must be strictly positive."""


class DimMismatch(ValueError, DrivebenchError):
    """Tensor or grid dimensions are incompatible."""


class ZeroWeightSum(ValueError, DrivebenchError):
    """Aggregation weights sum to zero."""


class ZeroOrigin(ValueError, DrivebenchError):
    """Drop rate undefined for non-positive origin score."""


class StepOutOfRange(ValueError, DrivebenchError):
    """Denoising step index outside the schedule."""


class EmptyAnchors(ValueError, DrivebenchError):
    """Diffusion planner needs at least one anchor."""


class TooFewSamples(ValueError, DrivebenchError):
    """Clustering needs at least K samples."""


class TooFewStyles(ValueError, DrivebenchError):
    """Dispersion statistic needs at least two styles."""
