"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class SignatureError(ValidationError):
    """Raised when a tensor's shape does not match a model's input signature."""


class SamplingError(RuntimeError):
    """Raised when a sampling operation cannot produce a valid result."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
