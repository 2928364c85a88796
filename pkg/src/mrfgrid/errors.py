"""Exception types shared across the package."""


class DomainError(ValueError):
    """Invalid input: out-of-range parameters, malformed geometry, bad shapes."""


class NumericError(ArithmeticError):
    """A factorization or optimization failed for numerical reasons."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SizeError(DomainError):
    """A dense computation was requested on a problem above its size guard."""
