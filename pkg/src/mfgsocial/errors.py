"""Exception types shared across the library."""


class UsageError(ValueError):
    """The caller violated an interface contract (shapes, domains, arguments)."""


class DimensionMismatchError(UsageError):
    """Operands live in different spaces or have inconsistent lengths."""


class InfeasibilityError(UsageError):
    """A constraint set is empty or a target value cannot be met."""


class ConstructionError(UsageError):
    """A declared model invariant failed its construction-time check."""


class NumericalError(RuntimeError):
    """An iterative routine failed to reach its required accuracy."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class UnboundednessError(NumericalError):
    """An objective is unbounded below over the feasible set."""


class InsufficientDataError(RuntimeError):
    """A study produced too few valid points to fit the requested quantity."""
