"""Exception types raised across the package."""


class NumericalFailure(ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``step`` carries the offending time step or iteration when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractViolation(ValueError):
    """An input violates a structural precondition (symmetry, binarity, ...)."""


class DataWarning(UserWarning):
    """Input data needed a fallback (zero variance, isolated node, missing scores)."""
