"""
Stationary Distribution Models
"""

from dataclasses import dataclass
from typing import List, Literal

import numpy as np


@dataclass(frozen=True)
class StationaryDistribution:
    """Invariant probability vector of a kernel with its convergence record."""

    probabilities: np.ndarray
    residual: float
    iterations: int
    method: Literal["power", "lazy-power", "direct"] = "power"

    @property
    def n(self) -> int:
        return self.probabilities.shape[0]

    @property
    def lazy(self) -> bool:
        return self.method == "lazy-power"


@dataclass(frozen=True)
class CommClassReport:
    """
    Strongly connected components of the kernel support digraph.

    labels[i] is the class of state i; classes[c] lists its states in ascending
    order; closed[c] is True when no edge leaves class c.
    """

    labels: np.ndarray
    classes: List[List[int]]
    closed: List[bool]

    @property
    def closed_classes(self) -> List[List[int]]:
        return [cls for cls, is_closed in zip(self.classes, self.closed) if is_closed]

    @property
    def is_unique(self) -> bool:
        return len(self.closed_classes) == 1
