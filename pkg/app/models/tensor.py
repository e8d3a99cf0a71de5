"""
Tensor Models

Dense real tensors on R^d and the positive-definite matrices used to measure them.

A SymTensor of order m stores all d**m entries as a numpy array of shape (d,)*m
(shape () for order 0). Indices are 0-based; index tuple (i1, ..., im) is the
entry entries[i1, ..., im]. Symmetry is not required: the toolkit only ever
produces symmetric tensors (outer powers, averages of outer powers) but the
algebra works for any dense tensor.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from app.exceptions import NotPositiveDefiniteError, ShapeMismatchError


@dataclass(frozen=True)
class SymTensor:
    """Order-m tensor on R^dim."""

    entries: np.ndarray
    dim: int

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=float)
        if arr.shape != (self.dim,) * arr.ndim:
            raise ShapeMismatchError(
                f"tensor entries of shape {arr.shape} do not match dimension {self.dim}"
            )
        object.__setattr__(self, "entries", arr)

    @property
    def order(self) -> int:
        return self.entries.ndim

    @classmethod
    def zeros(cls, dim: int, order: int) -> "SymTensor":
        return cls(np.zeros((dim,) * order), dim)

    @classmethod
    def scalar(cls, value: float, dim: int) -> "SymTensor":
        return cls(np.asarray(float(value)), dim)

    @classmethod
    def from_flat(cls, flat: np.ndarray, dim: int, order: int) -> "SymTensor":
        """Builds a tensor from its row-major flattening of length dim**order."""
        flat = np.asarray(flat, dtype=float)
        if flat.size != dim**order:
            raise ShapeMismatchError(f"expected {dim ** order} entries, got {flat.size}")
        return cls(flat.reshape((dim,) * order), dim)

    def flat(self) -> np.ndarray:
        return self.entries.reshape(-1)

    def __add__(self, other: "SymTensor") -> "SymTensor":
        if other.dim != self.dim or other.order != self.order:
            raise ShapeMismatchError("cannot add tensors of different shape")
        return SymTensor(self.entries + other.entries, self.dim)

    def __sub__(self, other: "SymTensor") -> "SymTensor":
        if other.dim != self.dim or other.order != self.order:
            raise ShapeMismatchError("cannot subtract tensors of different shape")
        return SymTensor(self.entries - other.entries, self.dim)

    def scaled(self, c: float) -> "SymTensor":
        return SymTensor(c * self.entries, self.dim)


@dataclass(frozen=True)
class MetricMatrix:
    """
    Symmetric positive-definite d x d matrix used as a metric.

    kind is a hint only: "identity" and "scaled" allow cheaper paths, but every
    operation gives the same result with kind="general".
    """

    entries: np.ndarray
    kind: Literal["identity", "scaled", "general"] = "general"

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeMismatchError(f"metric must be square, got shape {arr.shape}")
        scale = max(1.0, float(np.max(np.abs(arr))))
        if not np.allclose(arr, arr.T, rtol=0.0, atol=1e-12 * scale):
            raise NotPositiveDefiniteError("metric matrix is not symmetric")
        if float(np.linalg.eigvalsh(arr)[0]) <= 0.0:
            raise NotPositiveDefiniteError("metric matrix is not positive-definite")
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "MetricMatrix":
        return cls(np.eye(dim), "identity")

    @classmethod
    def scaled_identity(cls, dim: int, c: float) -> "MetricMatrix":
        return cls(c * np.eye(dim), "scaled")

    def inverse(self) -> "MetricMatrix":
        return MetricMatrix(np.linalg.inv(self.entries), self.kind)

    def max_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[-1])
