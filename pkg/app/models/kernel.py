"""
kNN Kernel Models

PointCloud    the data X_1..X_n on the torus with its seed provenance
SparseKernel  a row-stochastic kernel with rational rows count/denominator
MomentField   the jump-moment tensors M_m(X_i) of a kernel
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from app.exceptions import InvalidParameterError
from app.models.tensor import SymTensor


@dataclass(frozen=True)
class PointCloud:
    """n >= 2 wrapped points of the d-torus."""

    points: np.ndarray
    seed: Optional[int] = None
    stream: Tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 2:
            raise InvalidParameterError(f"a point cloud needs at least 2 points, got {pts.shape[0]}")
        if np.any(pts < 0.0) or np.any(pts >= 1.0):
            raise InvalidParameterError("point coordinates must be wrapped into [0, 1)")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class SparseKernel:
    """
    Markov kernel on {0..n-1} in CSR form with integer counts.

    Row i puts mass counts[p] / denominator on indices[p] for p in
    indptr[i]:indptr[i+1]; counts of each row sum to denominator, so rows are
    stochastic exactly. kNN kernels have denominator k and all counts 1.
    """

    n: int
    denominator: int
    indptr: np.ndarray
    indices: np.ndarray
    counts: np.ndarray
    radii: Optional[np.ndarray] = field(default=None, repr=False)
    include_self: bool = True

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if indptr.shape != (self.n + 1,) or indices.shape != counts.shape:
            raise InvalidParameterError("malformed kernel arrays")
        if np.any(counts <= 0) or np.any(indices < 0) or np.any(indices >= self.n):
            raise InvalidParameterError("kernel entries must have positive counts and valid indices")
        if np.any(np.diff(indptr) <= 0) or indptr[0] != 0 or indptr[-1] != counts.size:
            raise InvalidParameterError("every kernel row needs at least one entry")
        row_totals = np.add.reduceat(counts, indptr[:-1])
        if np.any(row_totals != self.denominator):
            raise InvalidParameterError(f"every kernel row must carry total count {self.denominator}")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "counts", counts)

    # =========================================================================
    # CONSTRUCTORS
    # =========================================================================

    @classmethod
    def from_neighbors(cls, neighbors: np.ndarray, radii=None, include_self: bool = True) -> "SparseKernel":
        """kNN kernel from an (n, k) neighbour index array."""
        neighbors = np.asarray(neighbors, dtype=np.int64)
        n, k = neighbors.shape
        return cls(
            n=n,
            denominator=k,
            indptr=np.arange(n + 1) * k,
            indices=neighbors.reshape(-1),
            counts=np.ones(n * k, dtype=np.int64),
            radii=None if radii is None else np.asarray(radii, dtype=float),
            include_self=include_self,
        )

    @classmethod
    def from_rows(cls, rows: Sequence[Dict[int, int]], denominator: int) -> "SparseKernel":
        """General kernel from per-row {index: count} maps."""
        indptr, indices, counts = [0], [], []
        for row in rows:
            for j in sorted(row):
                indices.append(j)
                counts.append(row[j])
            indptr.append(len(indices))
        return cls(n=len(rows), denominator=denominator, indptr=indptr, indices=indices, counts=counts)

    # =========================================================================
    # VIEWS
    # =========================================================================

    @property
    def k(self) -> int:
        return self.denominator

    def row(self, i: int) -> List[Tuple[int, Fraction]]:
        start, stop = self.indptr[i], self.indptr[i + 1]
        return [
            (int(j), Fraction(int(c), self.denominator))
            for j, c in zip(self.indices[start:stop], self.counts[start:stop])
        ]

    def row_sum(self, i: int) -> Fraction:
        return sum((p for _, p in self.row(i)), Fraction(0))

    def neighbor_array(self) -> np.ndarray:
        """(n, k) neighbour indices; only for kNN kernels (all counts 1)."""
        if np.any(self.counts != 1) or np.any(np.diff(self.indptr) != self.denominator):
            raise InvalidParameterError("kernel is not a kNN kernel")
        return self.indices.reshape(self.n, self.denominator)

    def to_csr(self) -> sparse.csr_matrix:
        data = self.counts.astype(float) / self.denominator
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def has_self_loop(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        loops = np.zeros(self.n, dtype=bool)
        loops[rows[self.indices == rows]] = True
        return loops


@dataclass(frozen=True)
class MomentField:
    """
    Jump moments M_m(X_i) = sum_j K(i, j) (X_j - X_i)^{(x) m}, m = 1..m_max.

    moments[m] has shape (n, d**m), rows are row-major flattened tensors.
    radii are the realized kernel radii (largest jump length of each row).
    """

    points: np.ndarray
    radii: np.ndarray
    moments: Dict[int, np.ndarray]
    m_max: int

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def tensor(self, i: int, m: int) -> SymTensor:
        return SymTensor.from_flat(self.moments[m][i], self.dim, m)
