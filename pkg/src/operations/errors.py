"""Exception hierarchy shared by every service in the package."""
from typing import List, Optional


class GPLooError(Exception):
    """Base class for all errors raised by gp-loo."""


class InvalidInputError(GPLooError, ValueError):
    """Inputs violate a documented precondition (shape, support, finiteness)."""


class NotPositiveDefiniteError(GPLooError):
    """A covariance matrix stayed indefinite after jitter escalation."""


class NumericalFailureError(GPLooError):
    """Quadrature or linear algebra produced no usable value."""

    def __init__(self, message: str, diagnostic: Optional[dict] = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class NonConvergenceError(GPLooError):
    """An iterative solver ran out of budget; `trace` holds the iterates seen."""

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


class UnsupportedOperationError(GPLooError):
    """The requested quantity is undefined for this likelihood."""


class CavityFailureError(GPLooError):
    """Removing a site left a non-positive cavity variance."""

    def __init__(self, index: int, precision: float):
        super().__init__(f"cavity precision {precision:.3e} at point {index} is not positive")
        self.index = index
        self.precision = precision


class DegenerateModelError(GPLooError):
    """The model implies a non-positive LOO variance."""


# Exit codes used by the command-line front end
EXIT_OK = 0
EXIT_INFERENCE_FAILURE = 1
EXIT_INPUT_ERROR = 2

INFERENCE_ERRORS = (NonConvergenceError, NumericalFailureError, NotPositiveDefiniteError, DegenerateModelError)
