"""
Toolkit Exceptions

Every failure an operation can report has its own class so callers
(controllers, CLI, sweep runner) can react precisely:

- controllers turn any ToolkitError into HTTP 422
- the CLI prints the message and exits with status 2
- the sweep runner records the class name on the failed row and continues
"""

from typing import List, Optional


class ToolkitError(Exception):
    """Base class of all toolkit errors."""


class ShapeMismatchError(ToolkitError, ValueError):
    """Tensor orders, dimensions or metric sizes do not match."""


class InvalidParameterError(ToolkitError, ValueError):
    """A documented pre-condition of an operation is violated."""


class NotPositiveDefiniteError(ToolkitError, ValueError):
    """A metric matrix is not symmetric positive-definite."""


class NonPositiveValueError(ToolkitError, ValueError):
    """A quantity that must be strictly positive is not."""


class UnsupportedDimensionError(ToolkitError):
    """The operation is not available in this dimension / tensor order."""


class UnsupportedGeneratorError(ToolkitError):
    """The operation does not apply to this generator (e.g. non-identity a)."""


class RadiusTooLargeError(ToolkitError):
    """A kNN radius reached 1/2, so minimal-image jump vectors are ambiguous."""

    def __init__(self, max_radius: float, point_index: int):
        self.max_radius = max_radius
        self.point_index = point_index
        super().__init__(
            f"kNN radius {max_radius:.6g} at point {point_index} is >= 1/2; "
            f"minimal-image moments are not defined"
        )


class MultipleClosedClassesError(ToolkitError):
    """The kernel has more than one closed class; the invariant measure is not unique."""

    def __init__(self, closed_classes: List[List[int]]):
        self.closed_classes = closed_classes
        super().__init__(
            f"kernel has {len(closed_classes)} closed communicating classes; "
            f"invariant measure is not unique"
        )


class MaxIterExceededError(ToolkitError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, iterations: int, residual: float, tol: Optional[float] = None):
        self.iterations = iterations
        self.residual = residual
        self.tol = tol
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(residual {residual:.3e}, tol {tol if tol is not None else 'n/a'})"
        )


class SizeLimitExceededError(ToolkitError):
    """The instance is too large (or of the wrong shape) for the requested solver."""


class ConvergenceError(ToolkitError):
    """The entropic ladder could not certify the requested gap."""


class DivergentSeriesError(ToolkitError):
    """A truncated series is still non-decreasing at its cap."""

    def __init__(self, what: str, cap: int, last_term: float):
        self.what = what
        self.cap = cap
        self.last_term = last_term
        super().__init__(f"{what} series non-decreasing at cap k={cap} (last term {last_term:.3e})")


class EmptyResultError(ToolkitError):
    """Nothing to report on."""


class ProxyResolutionError(ToolkitError):
    """The target grid proxy is too coarse for the distance it is used to measure."""

    def __init__(self, proxy_bound: float, w2: float, max_ratio: float):
        self.proxy_bound = proxy_bound
        self.w2 = w2
        self.max_ratio = max_ratio
        super().__init__(
            f"proxy bound {proxy_bound:.3e} exceeds {max_ratio:g} x W2 = {max_ratio * w2:.3e}"
        )
