"""
Tensor Service - Tensor Powers and Metric Norms

Every term of the Stein-type bound is a metric norm of a tensor:

    <x, y>_A = sum_{l, j} x_l y_j prod_i A[l_i, j_i]
    ||x||_A  = sqrt(<x, x>_A)

Contracting axis i of x with A for every i, then taking the flat dot product with y,
gives the sum above without ever forming the d^m x d^m matrix.

Two entry points:
- single tensors (SymTensor, MetricMatrix) for the algebra and its tests
- batched fields: n tensors of one order with n metrics, used for kNN moment fields
"""

import logging
from typing import Optional

import numpy as np

from app.config.settings import settings
from app.exceptions import ShapeMismatchError, UnsupportedDimensionError
from app.models.tensor import MetricMatrix, SymTensor

logger = logging.getLogger(__name__)


class TensorService:
    """
    Tensor algebra on R^d.

    Symmetric tensors are stored flat in row-major order (d**m entries for order
    m), which is the layout the jump moments are accumulated in. Orders and
    dimensions are capped by settings.tensor_max_order and tensor_max_dim, and
    exceeding either raises UnsupportedDimensionError before any d**m array is
    allocated.
    """

    def __init__(self, max_order: Optional[int] = None, max_dim: Optional[int] = None):
        self.max_order = max_order if max_order is not None else settings.tensor_max_order
        self.max_dim = max_dim if max_dim is not None else settings.tensor_max_dim

    # =========================================================================
    # SINGLE TENSORS
    # =========================================================================

    def tensor_power(self, v, m: int) -> SymTensor:
        """
        Outer power v^{(x) m}; order 0 is the scalar 1.

        Args:
            v: d-vector
            m: order, m >= 0

        Returns:
            SymTensor: entry at (j1..jm) equals prod_i v[j_i]
        """
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if m < 0:
            raise ShapeMismatchError(f"tensor order must be >= 0, got {m}")
        self._check_caps(v.size, m)

        result = np.asarray(1.0)
        for _ in range(m):
            result = np.multiply.outer(result, v)
        return SymTensor(result, v.size)

    def metric_inner(self, x: SymTensor, y: SymTensor, A: MetricMatrix) -> float:
        """
        Metric-weighted inner product of two tensors of equal order.

        Raises:
            ShapeMismatchError: orders or dimensions differ
        """
        self._check_pair(x, y, A)
        if x.order == 0:
            return float(x.entries * y.entries)

        contracted = x.entries
        if A.kind == "identity":
            return float(np.dot(contracted.reshape(-1), y.entries.reshape(-1)))

        for axis in range(x.order):
            # contract axis with A, new axis lands last, then move it back in place
            contracted = np.moveaxis(np.tensordot(contracted, A.entries, axes=([axis], [0])), -1, axis)
        return float(np.dot(contracted.reshape(-1), y.entries.reshape(-1)))

    def metric_norm(self, x: SymTensor, A: MetricMatrix) -> float:
        """sqrt(<x, x>_A), tiny negative radicands from rounding are clamped to 0."""
        value = self.metric_inner(x, x, A)
        scale = float(np.sum(x.entries**2))
        if value < 0.0:
            if value < -1e-12 * max(scale, 1e-300):
                logger.warning(f"Negative quadratic form {value:.3e} beyond rounding noise")
            return 0.0
        return float(np.sqrt(value))

    # =========================================================================
    # BATCHED FIELDS
    # =========================================================================

    def field_norms(self, tensors: np.ndarray, metrics: np.ndarray, order: int) -> np.ndarray:
        """
        Metric norms of n tensors of one order, each with its own metric.

        Args:
            tensors: (n, d**order) row-major flattened tensors
            metrics: (n, d, d) SPD matrices, or (n,) scalars c_i meaning c_i * I
            order: tensor order m >= 1

        Returns:
            np.ndarray: (n,) norms
        """
        tensors = np.asarray(tensors, dtype=float)
        n = tensors.shape[0]
        metrics = np.asarray(metrics, dtype=float)

        if metrics.ndim == 1:
            # conformal metric c I: ||T||_{cI} = c^{m/2} ||T||_I
            flat = np.sqrt(np.sum(tensors**2, axis=1))
            return flat * metrics ** (order / 2.0)

        d = metrics.shape[1]
        if tensors.shape[1] != d**order:
            raise ShapeMismatchError(f"expected {d ** order} tensor entries, got {tensors.shape[1]}")
        self._check_caps(d, order)

        # rotate the leading axis to the back after each contraction; after m rounds
        # the axes are back in the original order
        work = tensors.reshape(n, d, -1)
        for _ in range(order):
            work = np.einsum("nij,njr->nri", metrics, work).reshape(n, d, -1)
        quad = np.einsum("nr,nr->n", work.reshape(n, -1), tensors)
        scale = np.sum(tensors**2, axis=1)
        quad = np.where((quad < 0.0) & (quad >= -1e-12 * scale), 0.0, quad)
        return np.sqrt(np.maximum(quad, 0.0))

    def segment_power_sums(self, vectors: np.ndarray, weights: np.ndarray, starts: np.ndarray, m_max: int) -> dict:
        """
        Weighted sums of outer powers over consecutive segments.

        Args:
            vectors: (nnz, d) vectors, grouped by segment
            weights: (nnz,) weights
            starts: offset of each (non-empty) segment
            m_max: highest order

        Returns:
            dict: m -> (segments, d**m) array of sum_p w_p v_p^{(x) m}, m = 1..m_max
        """
        nnz, d = vectors.shape
        self._check_caps(d, m_max)
        sums = {}
        power = np.ones((nnz, 1))
        for m in range(1, m_max + 1):
            power = (power[:, :, None] * vectors[:, None, :]).reshape(nnz, -1)
            sums[m] = np.add.reduceat(power * weights[:, None], starts, axis=0)
        return sums

    # =========================================================================
    # HELPERS
    # =========================================================================

    def _check_pair(self, x: SymTensor, y: SymTensor, A: MetricMatrix) -> None:
        if x.order != y.order or x.dim != y.dim:
            raise ShapeMismatchError(
                f"tensor shapes differ: order {x.order}/{y.order}, dim {x.dim}/{y.dim}"
            )
        if A.dim != x.dim:
            raise ShapeMismatchError(f"metric dim {A.dim} does not match tensor dim {x.dim}")

    def _check_caps(self, d: int, m: int) -> None:
        if m > self.max_order or d > self.max_dim:
            raise UnsupportedDimensionError(
                f"tensor (d={d}, m={m}) beyond caps (d<={self.max_dim}, m<={self.max_order})"
            )


# Singleton instance
tensor_service = TensorService()
