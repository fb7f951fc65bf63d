class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericFailure(ArithmeticError):
    """Raised when a numerical routine fails to converge or produces non-finite output."""


class RunAborted(RuntimeError):
    """A run stopped mid-way; the partial trace is attached as ``trace``."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
