"""Exception types shared across the toolkit."""


class DeepszError(Exception):
    """Base class for all toolkit errors."""


class FormatError(DeepszError):
    """A file, byte stream, or config does not match its declared format."""


class DecodeError(FormatError):
    """A compressed payload is truncated or internally inconsistent."""


class InfeasiblePlanError(DeepszError):
    """No error-bound assignment satisfies the optimization constraint.

    `detail` carries the binding layer (accuracy mode) or the minimal
    achievable size in bytes (ratio mode).
    """

    def __init__(self, message: str, detail=None):
        super().__init__(message)
        self.detail = detail


class TrainingDivergedError(DeepszError):
    """Training loss became non-finite."""
