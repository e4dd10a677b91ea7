class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NumericalFailure(RuntimeError):
    """Raised when an iterative routine fails to converge or produces non-finite values."""
