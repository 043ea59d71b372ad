"""Exception hierarchy shared by all modules."""


class UncertlocError(Exception):
    """Base class for every error raised by this package."""


class DomainError(UncertlocError, ValueError):
    """An input lies outside the domain of an operation (non-finite value, pose in a wall)."""


class DegenerateOrientationError(DomainError):
    """An orientation pair has (near) zero norm and carries no heading."""


class EmptySampleError(UncertlocError, ValueError):
    """A statistic was requested over an empty collection."""


class ConfigurationError(UncertlocError, ValueError):
    """Shapes, dimensions or settings are inconsistent."""


class GenerationError(UncertlocError):
    """A trajectory could not be generated inside free space."""

    def __init__(self, message, pose=None, sequence_id=None):
        super().__init__(message)
        self.pose = pose
        self.sequence_id = sequence_id


class TrainingDivergedError(UncertlocError, FloatingPointError):
    """Loss or parameters became non-finite during optimisation."""

    def __init__(self, message, step=None, tensor=None):
        super().__init__(message)
        self.step = step
        self.tensor = tensor
