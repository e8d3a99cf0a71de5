"""
Kernel Service - kNN Radius, Kernel and Jump Moments

The kNN random walk on a point cloud X_1..X_n steps from X_i uniformly to one of the
k cloud points closest to X_i (X_i itself included by default):

    K(X_i, X_j) = (1/k) 1{ |X_j - X_i| <= r(X_i) }

Rows are exactly-k nearest with ties broken by ascending point index.

Neighbour search:
-----------------
Small clouds (n <= 64) use the brute-force oracle. Larger clouds query a periodic
KD-tree for a few extra candidates, re-rank them by the exact minimal-image distance
and fall back to brute force for any row whose k-th distance is not strictly inside
the candidate set. The result is identical to brute force.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from app.config.settings import settings
from app.exceptions import InvalidParameterError, RadiusTooLargeError
from app.models.kernel import MomentField, PointCloud, SparseKernel
from app.services.tensor_service import tensor_service
from app.services.torus_service import torus_service

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_N = 64
# extra KD-tree candidates per row used to certify ties
_EXTRA_CANDIDATES = 8
# tensor entries materialised at once while accumulating moments
_MOMENT_CHUNK = 4_000_000


class KernelService:
    """kNN radius, neighbour search, kernel construction and jump moments."""

    def __init__(self):
        self.tensors = tensor_service
        self.torus = torus_service

    # =========================================================================
    # RADIUS
    # =========================================================================

    def knn_radius(self, cloud: PointCloud, x, k: int) -> float:
        """
        k-th smallest torus distance from x to the cloud (a cloud point at x counts).

        Raises:
            InvalidParameterError: k outside 1..n
        """
        if not 1 <= k <= cloud.n:
            raise InvalidParameterError(f"k must be in [1, {cloud.n}], got {k}")
        x = np.asarray(x, dtype=float).reshape(1, cloud.dim)
        dist = np.linalg.norm(self.torus.min_image(x, cloud.points), axis=1)
        return float(np.partition(dist, k - 1)[k - 1])

    # =========================================================================
    # NEIGHBOUR SEARCH
    # =========================================================================

    def brute_force_neighbors(self, cloud: PointCloud, k: int, include_self: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact k nearest neighbours by full sort of every row.

        Returns:
            (neighbors, distances): (n, k) index and distance arrays sorted by
            (distance, index)
        """
        self._check_k(cloud, k, include_self)
        pts = cloud.points
        neighbors = np.empty((cloud.n, k), dtype=np.int64)
        distances = np.empty((cloud.n, k))
        for i in range(cloud.n):
            dist = np.linalg.norm(self.torus.min_image(pts[i], pts), axis=1)
            if not include_self:
                dist[i] = np.inf
            order = np.argsort(dist, kind="stable")[:k]
            neighbors[i] = order
            distances[i] = dist[order]
        return neighbors, distances

    def neighbor_search(self, cloud: PointCloud, k: int, include_self: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact k nearest neighbours of every cloud point under torus_distance.

        Args:
            cloud: point cloud
            k: neighbours per row
            include_self: whether X_i counts as its own neighbour

        Returns:
            (neighbors, distances): (n, k) arrays, rows sorted by (distance, index)
        """
        self._check_k(cloud, k, include_self)
        if cloud.n <= BRUTE_FORCE_MAX_N:
            return self.brute_force_neighbors(cloud, k, include_self)

        n, pts = cloud.n, cloud.points
        n_query = min(n, k + _EXTRA_CANDIDATES + (0 if include_self else 1))
        tree = cKDTree(pts, boxsize=1.0)

        neighbors = np.empty((n, k), dtype=np.int64)
        distances = np.empty((n, k))
        fallback = []
        chunk = max(1, 2_000_000 // n_query)
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            rows = np.arange(start, stop)
            _, cand = tree.query(pts[start:stop], k=n_query)
            cand = np.asarray(cand, dtype=np.int64).reshape(stop - start, n_query)

            dist = np.linalg.norm(self.torus.min_image(pts[rows, None, :], pts[cand]), axis=2)
            if not include_self:
                dist[cand == rows[:, None]] = np.inf
            order = np.lexsort((cand, dist), axis=-1)
            cand = np.take_along_axis(cand, order, axis=-1)
            dist = np.take_along_axis(dist, order, axis=-1)

            neighbors[start:stop] = cand[:, :k]
            distances[start:stop] = dist[:, :k]
            if n_query < n:
                finite = np.where(np.isfinite(dist), dist, -np.inf).max(axis=1)
                uncertain = dist[:, k - 1] >= finite - 1e-12
                fallback.extend(rows[uncertain].tolist())

        if fallback:
            logger.debug(f"Neighbour search: {len(fallback)} rows resolved by brute force")
            for i in fallback:
                dist = np.linalg.norm(self.torus.min_image(pts[i], pts), axis=1)
                if not include_self:
                    dist[i] = np.inf
                order = np.argsort(dist, kind="stable")[:k]
                neighbors[i] = order
                distances[i] = dist[order]
        return neighbors, distances

    # =========================================================================
    # KERNEL
    # =========================================================================

    def build_kernel(self, cloud: PointCloud, k: int, include_self: bool = True, strict: bool = True) -> SparseKernel:
        """
        kNN Markov kernel: row i is uniform on the k nearest cloud points to X_i.

        A radius of 1/2 or more means some neighbour sits at an ambiguous minimal
        image, so the jump moments of the kernel are undefined. That is an error
        unless strict is off, which is for callers that only need the Markov
        chain itself (stationary measures of tiny or complete clouds).

        Args:
            cloud: point cloud
            k: 2 <= k <= n (k <= n - 1 without self loops)
            include_self: keep X_i in its own row (the indicator includes j = i)
            strict: raise on a radius >= 1/2 instead of logging a warning

        Returns:
            SparseKernel: denominator k, realized radii attached

        Raises:
            RadiusTooLargeError: strict and some kNN radius >= 1/2
        """
        if k < 2:
            raise InvalidParameterError(f"k must be >= 2, got {k}")
        neighbors, distances = self.neighbor_search(cloud, k, include_self)
        radii = distances[:, -1].copy()
        largest = int(np.argmax(radii))
        if radii[largest] >= 0.5:
            if strict:
                raise RadiusTooLargeError(float(radii[largest]), largest)
            logger.warning(
                f"kNN radius {radii[largest]:.4g} at point {largest} reaches 1/2; "
                f"jump moments of this kernel are not defined"
            )
        logger.info(f"Built kNN kernel n={cloud.n}, k={k}, include_self={include_self}, r_max={radii[largest]:.4g}")
        return SparseKernel.from_neighbors(neighbors, radii=radii, include_self=include_self)

    # =========================================================================
    # MOMENTS
    # =========================================================================

    def kernel_moments(self, kernel: SparseKernel, cloud: PointCloud, m_max: Optional[int] = None) -> MomentField:
        """
        Jump moments M_m(X_i) = sum_j K(i, j) minimage(X_i, X_j)^{(x) m}, m = 1..m_max.

        Works for any SparseKernel; rows are processed in chunks so the outer powers
        never exceed a fixed number of entries.
        """
        m_max = m_max if m_max is not None else settings.moment_order
        if m_max < 2:
            raise InvalidParameterError(f"m_max must be >= 2, got {m_max}")
        if kernel.n != cloud.n:
            raise InvalidParameterError(f"kernel has {kernel.n} rows but the cloud has {cloud.n} points")

        d, pts = cloud.dim, cloud.points
        row_len = np.diff(kernel.indptr)
        entries_per_row = int(row_len.max()) * d**m_max
        chunk = max(1, _MOMENT_CHUNK // entries_per_row)

        moments = {m: np.empty((kernel.n, d**m)) for m in range(1, m_max + 1)}
        radii = np.empty(kernel.n)
        for start in range(0, kernel.n, chunk):
            stop = min(kernel.n, start + chunk)
            lo, hi = kernel.indptr[start], kernel.indptr[stop]
            owners = np.repeat(np.arange(start, stop), row_len[start:stop])
            jumps = self.torus.min_image(pts[owners], pts[kernel.indices[lo:hi]])
            weights = kernel.counts[lo:hi] / kernel.denominator
            starts = kernel.indptr[start:stop] - lo

            sums = self.tensors.segment_power_sums(jumps, weights, starts, m_max)
            for m, values in sums.items():
                moments[m][start:stop] = values
            radii[start:stop] = np.maximum.reduceat(np.linalg.norm(jumps, axis=1), starts)

        return MomentField(points=pts, radii=radii, moments=moments, m_max=m_max)

    def _check_k(self, cloud: PointCloud, k: int, include_self: bool) -> None:
        limit = cloud.n if include_self else cloud.n - 1
        if not 1 <= k <= limit:
            raise InvalidParameterError(f"k must be in [1, {limit}], got {k}")


# Singleton instance
kernel_service = KernelService()
