"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes disagree, or a dimension is not divisible as required."""


class GroupError(RuntimeError):
    """A rank worker failed inside a rank group."""

    def __init__(self, rank: int, cause: BaseException):
        super().__init__(f"rank {rank} failed: {type(cause).__name__}: {cause}")
        self.rank = rank
        self.cause = cause


class GroupTimeout(RuntimeError):
    """A rank group did not finish before its watchdog expired (likely deadlock)."""


class UsageError(RuntimeError):
    """An API object was used in a way its protocol forbids."""


class UnsupportedConfigError(ValueError):
    """The requested configuration is valid in principle but not supported."""


class TimelineError(ValueError):
    """A timeline is malformed."""
