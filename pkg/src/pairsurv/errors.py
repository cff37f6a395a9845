"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class OutOfRangeError(ValueError):
    """Raised when a time or index falls outside the valid domain."""


class IntegrationInstabilityError(RuntimeError):
    """Raised when a fixed-step integration leaves the probability simplex."""


class NonConvergenceError(RuntimeError):
    """Raised when every optimizer start fails; carries the best result found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class InitializationError(RuntimeError):
    """Raised when no finite log-posterior starting point could be found."""


class SchemaError(ValueError):
    """Raised when an input file does not match the expected layout."""
