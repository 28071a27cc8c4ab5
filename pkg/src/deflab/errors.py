"""Exception hierarchy shared by every deflab module."""


class DeflabError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(DeflabError, ValueError):
    """An argument violates a documented precondition."""


class SingularVolatilityError(DeflabError, ValueError):
    """The volatility matrix lost full row rank at some node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class StabilityError(DeflabError, RuntimeError):
    """An explicit scheme left its stability region; refine the grid."""


class NumericFailureError(DeflabError, FloatingPointError):
    """A coefficient or integrand became NaN or infinite."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
