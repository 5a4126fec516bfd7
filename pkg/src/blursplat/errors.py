"""Exception types raised across the package."""


class BlurSplatError(Exception):
    """Base class for all package errors."""


class NearSingularRotation(BlurSplatError, ValueError):
    pass


class ParameterOutOfRange(BlurSplatError, ValueError):
    pass


class InsufficientPoints(BlurSplatError, ValueError):
    pass


class ShapeMismatch(BlurSplatError, ValueError):
    pass


class EmptyStack(BlurSplatError, ValueError):
    pass


class DatasetMissingComponent(BlurSplatError, FileNotFoundError):
    pass


class DatasetParseError(BlurSplatError, ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CheckpointFormatError(BlurSplatError, ValueError):
    pass


class DivergedTraining(BlurSplatError, RuntimeError):
    """Raised when the loss becomes non-finite; carries the last good state."""

    def __init__(self, message: str, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
