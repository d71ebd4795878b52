"""Exception hierarchy shared by every module of the package."""


class SuperbranchError(Exception):
    """Base class for all package errors."""


class ValidationError(SuperbranchError, ValueError):
    """A model description violates one of its structural invariants."""


class DomainError(SuperbranchError, ValueError):
    """An argument lies outside the domain of the operation."""


class DensityTooSmall(ValidationError):
    """The density parameter k is too small for the particle construction.

    ``constraint`` names the non-negativity requirement that failed.
    """

    def __init__(self, message, constraint, k_min):
        super().__init__(message)
        self.constraint = constraint
        self.k_min = k_min


class GuardExceeded(SuperbranchError):
    """Simulation stopped on an event or population guard.

    The partial snapshots recorded before the guard tripped are kept on
    ``partial``.
    """

    def __init__(self, message, partial=None, reason=""):
        super().__init__(message)
        self.partial = partial
        self.reason = reason


class InvariantViolation(SuperbranchError, RuntimeError):
    """Internal consistency check failed (for example a thinning rate above its bound)."""


class SolverDivergence(SuperbranchError, RuntimeError):
    """Picard iteration failed to converge."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class SolverInstability(SuperbranchError, RuntimeError):
    """Integrator produced values too negative to be rounding noise."""


class GridError(SuperbranchError, LookupError):
    """Requested time is not on the solver or snapshot grid."""
