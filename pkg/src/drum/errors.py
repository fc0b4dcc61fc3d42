"""Exception types shared across the package."""


class DrumError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(DrumError, ValueError):
    """An argument violates an operation precondition."""


class DegenerateTimeError(DrumError):
    """A diffusion-time endpoint makes the requested quantity undefined (division by a vanishing schedule coefficient)."""


class ScheduleInconsistencyError(DrumError):
    """Schedule coefficients produced an impossible transition (e.g. negative re-noising variance)."""


class NumericFailureError(DrumError):
    """Non-finite values appeared mid-computation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TrainingDivergenceError(DrumError):
    """The training loss became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class InsufficientDataError(DrumError, ValueError):
    """Too few samples to estimate the requested statistic."""
