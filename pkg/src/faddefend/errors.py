"""Exception types shared across the package."""


class FadDefendError(Exception):
    """Base class for all package errors."""


class DimensionError(FadDefendError, ValueError):
    """Image or patch dimensions violate an operation's preconditions."""


class EncodingError(FadDefendError, RuntimeError):
    """The image codec failed to encode or decode."""


class OptimizationError(FadDefendError, RuntimeError):
    """Reconstruction diverged (non-finite loss)."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class TrainingError(FadDefendError, RuntimeError):
    """Classifier training could not proceed (e.g. insufficient data)."""


class DatasetError(FadDefendError, RuntimeError):
    """A dataset is empty, unreadable, or inconsistent."""


class CalibrationError(FadDefendError, RuntimeError):
    """Threshold calibration failed; carries the measured accuracy curve."""

    def __init__(self, message: str, curve):
        super().__init__(message)
        self.curve = curve
