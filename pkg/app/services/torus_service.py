"""
Torus Service - Flat-Torus Geometry, Densities and Sampling

Geometry of T = (R/Z)^d and the diffusion attached to a density f:

    L phi = f^{-2/d} (grad log f . grad phi + 1/2 laplacian phi)
          = b . grad phi + <a, hess phi>

    a(x) = 1/2 f(x)^{-2/d} I          b(x) = f(x)^{-2/d} grad log f(x)

The metric induced by a has line element sqrt(2) f^{1/d} |dx|; conformal_geodesic
approximates its distance by shortest paths on a periodic grid.

Sampling uses a counter-based generator (Philox) keyed by (seed, stream), so any
(seed, stream) pair reproduces the same points regardless of which worker draws them.
"""

import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from app.exceptions import InvalidParameterError, UnsupportedDimensionError
from app.models.tensor import MetricMatrix
from app.models.torus import DensityModel, QuadGrid, TargetMeasure

logger = logging.getLogger(__name__)

# endpoints closer than this to a grid node are snapped onto it
_SNAP_TOL = 1e-12
# off-grid endpoints connect to nodes within this many cells
_ATTACH_CELLS = 2


class TorusService:
    """Geometry, density coefficients, target normalisation and sampling on the torus."""

    # =========================================================================
    # GEOMETRY
    # =========================================================================

    def wrap(self, x) -> np.ndarray:
        """Coordinates reduced into [0, 1)."""
        w = np.mod(np.asarray(x, dtype=float), 1.0)
        # x slightly below an integer can round up to exactly 1.0
        return np.where(w >= 1.0, 0.0, w)

    def min_image(self, x, y) -> np.ndarray:
        """
        Representative of y - x with every coordinate in (-1/2, 1/2].

        Broadcasts over leading axes.
        """
        diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        diff = diff - np.round(diff)
        # round() sends -1/2 to -0 or -1/2 depending on parity; fix the boundary to +1/2
        return np.where(diff <= -0.5, diff + 1.0, diff)

    def torus_distance(self, x, y) -> np.ndarray:
        """Euclidean norm of min_image; a scalar for single points."""
        dist = np.linalg.norm(np.atleast_1d(self.min_image(x, y)), axis=-1)
        return float(dist) if np.ndim(dist) == 0 else dist

    # =========================================================================
    # DENSITY AND DIFFUSION COEFFICIENTS
    # =========================================================================

    def grad_log_density(self, model: DensityModel, x) -> np.ndarray:
        """grad f / f from the analytic series; (n, d) for (n, d) input."""
        x = np.asarray(x, dtype=float)
        values = model.value(x)
        grads = model.gradient(x) / values[:, None]
        return grads[0] if x.ndim <= 1 and x.size == model.dim else grads

    def coefficient_fields(self, model: DensityModel, points) -> Tuple[np.ndarray, np.ndarray]:
        """
        Drift and diffusion at many points.

        Returns:
            (b, c): b of shape (n, d); c of shape (n,) with a(x_i) = c_i * I
        """
        points = np.asarray(points, dtype=float).reshape(-1, model.dim)
        values = model.value(points)
        factor = values ** (-2.0 / model.dim)
        b = factor[:, None] * model.gradient(points) / values[:, None]
        return b, 0.5 * factor

    def diffusion_coeffs(self, model: DensityModel, x) -> Tuple[np.ndarray, MetricMatrix]:
        """b(x) and a(x) = 1/2 f(x)^{-2/d} I at a single point."""
        b, c = self.coefficient_fields(model, np.atleast_1d(x))
        return b[0], MetricMatrix.scaled_identity(model.dim, float(c[0]))

    def conformal_factor(self, model: DensityModel, points) -> np.ndarray:
        """Line element of the metric induced by a: sqrt(2) f^{1/d}."""
        return np.sqrt(2.0) * model.value(points) ** (1.0 / model.dim)

    def normalize_target(self, model: DensityModel, m_g: int) -> TargetMeasure:
        """
        Target measure Z f^{2+2/d} with Z from midpoint quadrature on an m_g^d grid.
        """
        grid = QuadGrid(m_g, model.dim)
        exponent = 2.0 + 2.0 / model.dim
        average = float(np.mean(model.value(grid.centers) ** exponent))
        normalizer = 1.0 / average
        logger.debug(f"Target normalizer Z={normalizer:.12g} (m_g={m_g}, d={model.dim})")
        return TargetMeasure(model=model, exponent=exponent, normalizer=normalizer, grid=grid)

    # =========================================================================
    # SAMPLING
    # =========================================================================

    def rng(self, seed: int, stream: Sequence[int] = ()) -> np.random.Generator:
        """Counter-based generator for (seed, stream)."""
        seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
        return np.random.Generator(np.random.Philox(seq))

    def sample(self, model: DensityModel, n: int, seed: int, stream: Sequence[int] = ()) -> np.ndarray:
        """
        n i.i.d. points of density f by rejection from the uniform proposal.

        Args:
            model: density f
            n: number of points, n >= 1
            seed: base seed
            stream: spawn key separating independent draws under one seed

        Returns:
            np.ndarray: (n, d) wrapped points
        """
        if n < 1:
            raise InvalidParameterError(f"sample size must be >= 1, got {n}")
        generator = self.rng(seed, stream)
        if model.is_uniform:
            return self.wrap(generator.random((n, model.dim)))

        envelope = model.envelope
        acceptance = model.lower_bound / envelope
        accepted = []
        count = 0
        while count < n:
            batch = int(np.ceil((n - count) / acceptance * 1.1)) + 16
            proposals = generator.random((batch, model.dim))
            heights = generator.random(batch) * envelope
            keep = proposals[heights < model.value(proposals)]
            accepted.append(keep)
            count += keep.shape[0]
        return self.wrap(np.concatenate(accepted, axis=0)[:n])

    # =========================================================================
    # CONFORMAL GEODESIC
    # =========================================================================

    def conformal_geodesic(self, model: DensityModel, x, y, grid_res: int) -> float:
        """
        Upper approximation of the distance induced by a between x and y.

        d=1: arc integral of the line element on a linear grid (trapezoid per edge),
             shorter of the two arcs.
        d=2: shortest path on an 8-connected periodic grid, edge weight
             = mean line element of the endpoints x Euclidean edge length.
        """
        self._check_geodesic(model, grid_res)
        x = self.wrap(np.atleast_1d(np.asarray(x, dtype=float)))
        y = self.wrap(np.atleast_1d(np.asarray(y, dtype=float)))

        if model.dim == 1:
            return float(self._arc_distance(model, x, y, grid_res)[0, 0])

        graph, node_factor = self._grid_graph(model, grid_res)
        rows, cols, weights = [], [], []
        n_nodes = grid_res * grid_res

        source = self._snap(x, grid_res)
        target = self._snap(y, grid_res)
        extra = n_nodes
        if source is None:
            source = extra
            extra += 1
            self._attach(model, x, source, grid_res, node_factor, rows, cols, weights)
        if target is None:
            target = extra
            extra += 1
            self._attach(model, y, target, grid_res, node_factor, rows, cols, weights)
            if source >= n_nodes:
                jump = self.min_image(x, y)
                length = float(np.linalg.norm(jump))
                if 0.0 < length <= _ATTACH_CELLS / grid_res:
                    factors = self.conformal_factor(model, np.vstack([x, y]))
                    rows.append(source)
                    cols.append(target)
                    weights.append(length * 0.5 * (factors[0] + factors[1]))
        if source == target:
            return 0.0

        if extra > n_nodes:
            graph = sparse.bmat([[graph, None], [None, sparse.csr_matrix((extra - n_nodes, extra - n_nodes))]])
            if rows:
                attach = sparse.csr_matrix((weights, (rows, cols)), shape=(extra, extra))
                graph = (graph + attach).tocsr()
        dist = dijkstra(graph, directed=False, indices=source)
        return float(dist[target])

    def geodesic_cost_matrix(self, model: DensityModel, atoms_a, atoms_b, grid_res: int) -> np.ndarray:
        """
        Pairwise conformal distances between two atom sets.

        d=1 uses the exact arc formula; d=2 snaps atoms to their nearest grid node,
        runs multi-source shortest paths and adds the snapping legs.
        """
        self._check_geodesic(model, grid_res)
        atoms_a = self.wrap(np.asarray(atoms_a, dtype=float).reshape(-1, model.dim))
        atoms_b = self.wrap(np.asarray(atoms_b, dtype=float).reshape(-1, model.dim))
        if model.dim == 1:
            return self._arc_distance(model, atoms_a, atoms_b, grid_res)

        graph, node_factor = self._grid_graph(model, grid_res)
        nodes_a, legs_a = self._nearest_nodes(model, atoms_a, grid_res, node_factor)
        nodes_b, legs_b = self._nearest_nodes(model, atoms_b, grid_res, node_factor)
        sources, inverse = np.unique(nodes_a, return_inverse=True)
        dist = dijkstra(graph, directed=False, indices=sources)
        return legs_a[:, None] + dist[inverse][:, nodes_b] + legs_b[None, :]

    # =========================================================================
    # HELPERS
    # =========================================================================

    def _check_geodesic(self, model: DensityModel, grid_res: int) -> None:
        if model.dim > 2:
            raise UnsupportedDimensionError(f"conformal geodesics need d <= 2, got d={model.dim}")
        if grid_res < 32:
            raise InvalidParameterError(f"grid_res must be >= 32, got {grid_res}")

    def _arc_distance(self, model: DensityModel, xs: np.ndarray, ys: np.ndarray, grid_res: int) -> np.ndarray:
        nodes = np.arange(grid_res + 1) / grid_res
        factor = self.conformal_factor(model, nodes[:, None])
        cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (factor[1:] + factor[:-1]) / grid_res)])
        total = cumulative[-1]

        def position(u: np.ndarray) -> np.ndarray:
            u = u.reshape(-1)
            idx = np.minimum((u * grid_res).astype(int), grid_res - 1)
            left = nodes[idx]
            f_u = self.conformal_factor(model, u[:, None])
            return cumulative[idx] + (u - left) * 0.5 * (factor[idx] + f_u)

        forward = np.mod(position(ys)[None, :] - position(xs)[:, None], total)
        return np.minimum(forward, total - forward)

    def _grid_graph(self, model: DensityModel, grid_res: int):
        h = 1.0 / grid_res
        idx = np.arange(grid_res)
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        coords = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1) * h
        node_factor = self.conformal_factor(model, coords)
        node = (ii * grid_res + jj).reshape(-1)

        rows, cols, weights = [], [], []
        for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
            other = (((ii + di) % grid_res) * grid_res + (jj + dj) % grid_res).reshape(-1)
            length = h * np.hypot(di, dj)
            rows.append(node)
            cols.append(other)
            weights.append(length * 0.5 * (node_factor[node] + node_factor[other]))
        n_nodes = grid_res * grid_res
        graph = sparse.csr_matrix(
            (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_nodes, n_nodes),
        )
        return graph, node_factor

    def _snap(self, x: np.ndarray, grid_res: int):
        scaled = x * grid_res
        nearest = np.round(scaled)
        if np.all(np.abs(scaled - nearest) <= _SNAP_TOL * grid_res):
            i, j = (nearest.astype(int) % grid_res)
            return int(i * grid_res + j)
        return None

    def _attach(self, model, x, extra_node, grid_res, node_factor, rows, cols, weights) -> None:
        base = np.floor(x * grid_res).astype(int)
        f_x = float(self.conformal_factor(model, x[None, :])[0])
        span = range(-_ATTACH_CELLS + 1, _ATTACH_CELLS + 1)
        for di in span:
            for dj in span:
                i = (base[0] + di) % grid_res
                j = (base[1] + dj) % grid_res
                node = i * grid_res + j
                length = float(np.linalg.norm(self.min_image(x, np.array([i, j]) / grid_res)))
                if length > 0.0:
                    rows.append(extra_node)
                    cols.append(node)
                    weights.append(length * 0.5 * (f_x + node_factor[node]))

    def _nearest_nodes(self, model, atoms, grid_res, node_factor):
        nearest = np.mod(np.round(atoms * grid_res).astype(int), grid_res)
        nodes = nearest[:, 0] * grid_res + nearest[:, 1]
        lengths = np.linalg.norm(self.min_image(atoms, nearest / grid_res), axis=1)
        legs = lengths * 0.5 * (self.conformal_factor(model, atoms) + node_factor[nodes])
        return nodes, legs


# Singleton instance
torus_service = TorusService()
