"""Exception types shared across the package."""


class ListenMotionError(Exception):
    """Base class for all package errors."""


class InvalidInput(ListenMotionError):
    """An argument violates an operation's precondition."""


class InvalidConfig(ListenMotionError):
    """A configuration value is out of its valid range or inconsistent."""


class FormatError(ListenMotionError):
    """A file does not conform to its container format.

    Carries the byte offset at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ListenMotionError):
    """Training diverged or could not start."""


class ModelError(ListenMotionError):
    """A model produced unusable output (NaN/Inf logits)."""


class DegenerateState(ListenMotionError):
    """A posterior is undefined because a conditioning event has zero probability."""
