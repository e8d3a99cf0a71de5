"""
Transport Service - Wasserstein-2 Distances Between Discrete Measures

    W2(A, B)^2 = min over couplings P of sum_ij P_ij c(x_i, y_j)^2

Solvers:
--------
exact_w2        network simplex (POT ot.emd) on the dense cost matrix
entropic_w2     POT log-domain Sinkhorn on a decreasing epsilon ladder, warm-started
                between stages; each stage plan is rounded onto the exact marginals
                (so its cost is an upper bound) and the c-transformed dual potentials
                give a lower bound. The ladder stops once
                sqrt(primal) - sqrt(dual) <= target_gap.
circle_w2       exact W2 on the circle (d = 1) by POT's binary search over the
                cyclic shift; sizes are only limited by sorting
semidual_w2     few atoms against a fine grid proxy (d >= 2), both discrete: entropic
                semi-dual over the potentials of the atoms, each grid point seeing
                its nearest candidates in a lifted periodic KD-tree, certified by
                the same primal / dual pair
brute_force_w2  minimum over permutation matchings (test oracle, <= 8 atoms)

Metrics: "torus" (minimal-image Euclidean) and "conformal" (the metric induced by
a = 1/2 f^{-2/d} I, approximated by grid geodesics).
"""

import itertools
import logging
import math
from typing import Optional, Tuple

import numpy as np
import ot
from scipy import sparse
from scipy.optimize import fmin_l_bfgs_b
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from app.config.settings import settings
from app.exceptions import ConvergenceError, InvalidParameterError, SizeLimitExceededError
from app.models.torus import DensityModel, QuadGrid, TargetMeasure
from app.models.transport import DiscreteMeasure, TransportPlan
from app.services.torus_service import torus_service

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_ATOMS = 8
DEFAULT_GEODESIC_GRID = 64
# coarse target grid per dimension, used for the first W2 estimate of a sweep cell
DEFAULT_TARGET_GRID = {1: 512, 2: 40, 3: 16}

_EMD_MAX_ITER = 10_000_000
_STAGE_TOL = 1e-10
_COST_CHUNK = 4_000_000
_SEMIDUAL_STAGES = 40


class TransportService:
    """Cost matrices, grid proxies and W2 solvers."""

    def __init__(self):
        self.torus = torus_service

    # =========================================================================
    # PROXIES AND COSTS
    # =========================================================================

    def grid_for_error(self, expected_w2: float, dim: int, max_ratio: float) -> int:
        """
        Points per axis of the coarsest target grid whose half-cell bound
        sqrt(d) / (2 m) stays within max_ratio * expected_w2.

        A proxy built on that grid moves no target mass further than a tenth (for
        max_ratio = 0.1) of the distance being measured, so the measured W2 is
        dominated by pi and not by the discretisation.

        Raises:
            InvalidParameterError: expected_w2 not positive and finite, or max_ratio <= 0
        """
        if expected_w2 <= 0.0 or not math.isfinite(expected_w2):
            raise InvalidParameterError(f"expected W2 must be positive and finite, got {expected_w2}")
        if not 0.0 < max_ratio:
            raise InvalidParameterError(f"max_ratio must be > 0, got {max_ratio}")
        return max(2, math.ceil(math.sqrt(dim) / (2.0 * max_ratio * expected_w2)))

    def discretize_target(self, target: TargetMeasure, m_per_axis: int) -> DiscreteMeasure:
        """
        Grid proxy of the target: atoms at cell centres, weights proportional to the
        target density there, half-cell bound recorded as proxy_bound.
        """
        grid = QuadGrid(m_per_axis, target.model.dim)
        centers = grid.centers
        density = target.model.value(centers) ** target.exponent
        return DiscreteMeasure.normalized(centers, density, proxy_bound=grid.half_cell_bound)

    def bin_to_grid(self, measure: DiscreteMeasure, m_per_axis: int) -> DiscreteMeasure:
        """Moves every atom to the centre of its grid cell (mass moves at most a half cell)."""
        grid = QuadGrid(m_per_axis, measure.dim)
        cells = np.minimum((measure.atoms * m_per_axis).astype(np.int64), m_per_axis - 1)
        flat = np.ravel_multi_index(tuple(cells.T), (m_per_axis,) * measure.dim)
        mass = np.bincount(flat, weights=measure.weights, minlength=grid.size)
        return DiscreteMeasure.normalized(
            grid.centers, mass, proxy_bound=measure.proxy_bound + grid.half_cell_bound
        )

    def cost_matrix(
        self,
        A: DiscreteMeasure,
        B: DiscreteMeasure,
        metric: str = "torus",
        model: Optional[DensityModel] = None,
        grid_res: int = DEFAULT_GEODESIC_GRID,
    ) -> np.ndarray:
        """Squared distances between the atoms of A and B."""
        if A.dim != B.dim:
            raise InvalidParameterError(f"measures live in different dimensions ({A.dim}, {B.dim})")
        if metric == "torus":
            cost = np.empty((A.size, B.size))
            rows = max(1, _COST_CHUNK // max(1, B.size * A.dim))
            for start in range(0, A.size, rows):
                stop = min(A.size, start + rows)
                diff = self.torus.min_image(A.atoms[start:stop, None, :], B.atoms[None, :, :])
                cost[start:stop] = np.sum(diff**2, axis=2)
            return cost
        if metric == "conformal":
            if model is None:
                raise InvalidParameterError("conformal metric needs a density model")
            return self.torus.geodesic_cost_matrix(model, A.atoms, B.atoms, grid_res) ** 2
        raise InvalidParameterError(f"unknown metric {metric!r}")

    # =========================================================================
    # EXACT
    # =========================================================================

    def exact_w2(
        self,
        A: DiscreteMeasure,
        B: DiscreteMeasure,
        metric: str = "torus",
        model: Optional[DensityModel] = None,
        grid_res: int = DEFAULT_GEODESIC_GRID,
        limit: Optional[int] = None,
    ) -> Tuple[float, TransportPlan]:
        """
        Exact W2 by network simplex.

        Raises:
            SizeLimitExceededError: |A| * |B| beyond the dense limit
        """
        limit = limit if limit is not None else settings.exact_ot_limit
        A_s, B_s = A.support(), B.support()
        if A_s.size * B_s.size > limit:
            raise SizeLimitExceededError(
                f"exact transport on {A_s.size} x {B_s.size} atoms exceeds the limit {limit}; use entropic_w2"
            )
        cost = self.cost_matrix(A_s, B_s, metric, model, grid_res)
        plan = ot.emd(A_s.weights, B_s.weights, cost, numItermax=_EMD_MAX_ITER)
        rows, cols = np.nonzero(plan > 0.0)
        flows = plan[rows, cols]
        total = math.fsum(flows * cost[rows, cols])

        # report the plan in the original atom indexing
        rows = np.flatnonzero(A.weights > 0.0)[rows]
        cols = np.flatnonzero(B.weights > 0.0)[cols]
        coupling = sparse.coo_matrix((flows, (rows, cols)), shape=(A.size, B.size))
        distance = math.sqrt(max(total, 0.0))
        logger.debug(f"Exact W2 on {A_s.size}x{B_s.size} atoms: {distance:.6g}")
        return distance, TransportPlan(flows=coupling, cost=total)

    def circle_w2(self, A: DiscreteMeasure, B: DiscreteMeasure) -> float:
        """
        Exact W2 between two measures on the circle R/Z.

        On the circle the optimal plan is monotone up to one cyclic shift of the
        quantile functions, so POT only has to search that shift; no cost matrix
        is formed and a million-point grid proxy is cheap.

        Raises:
            InvalidParameterError: either measure is not one-dimensional
        """
        if A.dim != 1 or B.dim != 1:
            raise InvalidParameterError(f"circle_w2 needs one-dimensional measures, got ({A.dim}, {B.dim})")
        A_s, B_s = A.support(), B.support()
        squared = ot.wasserstein_circle(
            A_s.atoms[:, 0], B_s.atoms[:, 0], A_s.weights, B_s.weights, p=2
        )
        distance = math.sqrt(max(float(np.asarray(squared).reshape(-1)[0]), 0.0))
        logger.debug(f"Circle W2 on {A_s.size}x{B_s.size} atoms: {distance:.6g}")
        return distance

    def brute_force_w2(self, A: DiscreteMeasure, B: DiscreteMeasure, metric: str = "torus", model=None) -> float:
        """
        Minimum over all perfect matchings of two equal-weight measures.

        Raises:
            SizeLimitExceededError: more than 8 atoms, different sizes or unequal weights
        """
        n = A.size
        if n > BRUTE_FORCE_MAX_ATOMS or B.size != n:
            raise SizeLimitExceededError(
                f"brute force needs two measures with the same number (<= {BRUTE_FORCE_MAX_ATOMS}) of atoms"
            )
        for measure in (A, B):
            if np.max(np.abs(measure.weights - 1.0 / n)) > 1e-12:
                raise SizeLimitExceededError("brute force needs equal weights")
        cost = self.cost_matrix(A, B, metric, model)
        perms = np.array(list(itertools.permutations(range(n))))
        totals = cost[np.arange(n)[None, :], perms].sum(axis=1) / n
        return math.sqrt(max(float(totals.min()), 0.0))

    # =========================================================================
    # ENTROPIC
    # =========================================================================

    def entropic_w2(
        self,
        A: DiscreteMeasure,
        B: DiscreteMeasure,
        metric: str = "torus",
        target_gap: Optional[float] = None,
        model: Optional[DensityModel] = None,
        grid_res: int = DEFAULT_GEODESIC_GRID,
        max_iter: Optional[int] = None,
    ) -> float:
        """
        Certified upper bound on W2 within target_gap of the exact value.

        Every stage runs POT's log-domain Sinkhorn at regularisation eps, starting
        from the potentials of the previous stage. Its plan only matches the
        marginals approximately, so it is rounded onto them before its cost is
        taken; the potentials are c-transformed into a feasible dual pair. The
        best primal and dual seen so far bracket W2^2.

        Raises:
            InvalidParameterError: target_gap <= 0
            ConvergenceError: the ladder could not certify target_gap
        """
        target_gap = target_gap if target_gap is not None else settings.entropic_target_gap
        max_iter = max_iter if max_iter is not None else settings.entropic_max_iter
        if target_gap <= 0.0:
            raise InvalidParameterError(f"target_gap must be > 0, got {target_gap}")

        A_s, B_s = A.support(), B.support()
        cost = self.cost_matrix(A_s, B_s, metric, model, grid_res)
        a, b = A_s.weights, B_s.weights
        scale = float(cost.max())
        if scale == 0.0:
            return 0.0

        f = np.zeros(a.size)
        g = np.zeros(b.size)
        eps = scale / 4.0
        eps_floor = scale * 1e-9
        best_primal, best_dual = math.inf, 0.0
        gap = math.inf
        stage = 0
        while eps >= eps_floor:
            stage += 1
            plan, log = ot.sinkhorn(
                a,
                b,
                cost,
                eps,
                method="sinkhorn_log",
                numItermax=max_iter,
                stopThr=_STAGE_TOL,
                warmstart=(f / eps, g / eps),
                log=True,
                warn=False,
            )
            f, g = eps * log["log_u"], eps * log["log_v"]

            plan = self._round_to_marginals(plan, a, b)
            best_primal = min(best_primal, math.fsum((plan * cost).ravel()))
            best_dual = max(best_dual, self._dual_value(f, cost, a, b))
            gap = math.sqrt(best_primal) - math.sqrt(best_dual)
            logger.debug(f"Entropic stage {stage}: eps={eps:.3e}, primal={best_primal:.6e}, gap={gap:.3e}")
            if gap <= target_gap:
                return math.sqrt(best_primal)
            eps *= 0.5

        logger.error(f"Entropic ladder ended with gap {gap:.3e} > {target_gap:.3e}")
        raise ConvergenceError(f"entropic ladder could not certify gap {target_gap:.3e} (reached {gap:.3e})")

    def _round_to_marginals(self, plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Scales rows then columns down to the marginals and adds the rank-one correction."""
        row = plan.sum(axis=1)
        plan = plan * np.minimum(1.0, a / np.maximum(row, 1e-300))[:, None]
        col = plan.sum(axis=0)
        plan = plan * np.minimum(1.0, b / np.maximum(col, 1e-300))[None, :]
        err_a = a - plan.sum(axis=1)
        err_b = b - plan.sum(axis=0)
        missing = float(np.sum(err_a))
        if missing > 0.0:
            plan = plan + np.outer(np.maximum(err_a, 0.0), np.maximum(err_b, 0.0)) / missing
        return plan

    def _dual_value(self, f: np.ndarray, cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
        """Dual objective of the c-transformed (hence feasible) pair built from f."""
        g = np.min(cost - f[:, None], axis=0)
        f = np.min(cost - g[None, :], axis=1)
        return math.fsum(np.concatenate([a * f, b * g]))

    # =========================================================================
    # SEMI-DUAL
    # =========================================================================

    def semidual_w2(
        self,
        A: DiscreteMeasure,
        B: DiscreteMeasure,
        target_gap: Optional[float] = None,
        neighbours: Optional[int] = None,
        max_iter: Optional[int] = None,
    ) -> float:
        """
        Certified upper bound on the torus W2 between a measure A with few atoms and
        a fine grid measure B, within target_gap of the exact value. Both measures
        are discrete; B is the grid proxy of the density, never the density itself.

        The dense n x M problem never exists. For potentials g on the atoms of A,
        every grid point x_j only interacts with the atoms minimising
        c(x_j, y_i) - g_i, its cheapest owners; those are the nearest
        neighbours of (x_j, 0) among the lifted atoms (y_i, sqrt(max g - g_i)) in a
        periodic KD-tree, so one query of the grid gives them all.

        The semi-dual sum_i a_i g_i + sum_j b_j softmin_i(c_ji - g_i) is maximised
        with L-BFGS for a decreasing softmin temperature eps. After every stage

            lower^2 = sum_i a_i g_i + sum_j b_j min_i (c_ji - g_i)
            upper^2 = cost of the softmin plan scaled into a's marginal
                      + (d / 4) * mass left over

        (the left-over mass can travel at most the torus diameter sqrt(d) / 2).
        The best pair seen brackets W2^2, like in entropic_w2.

        Raises:
            InvalidParameterError: target_gap <= 0 or measures of different dimension
            ConvergenceError: no stage reached target_gap
        """
        target_gap = target_gap if target_gap is not None else settings.entropic_target_gap
        neighbours = neighbours if neighbours is not None else settings.semidual_neighbours
        max_iter = max_iter if max_iter is not None else settings.semidual_max_iter
        if target_gap <= 0.0:
            raise InvalidParameterError(f"target_gap must be > 0, got {target_gap}")
        if A.dim != B.dim:
            raise InvalidParameterError(f"measures live in different dimensions ({A.dim}, {B.dim})")

        A_s, B_s = A.support(), B.support()
        atoms = np.where(A_s.atoms >= 1.0, 0.0, A_s.atoms)
        grid = np.column_stack([B_s.atoms, np.zeros(B_s.size)])
        a, b = A_s.weights, B_s.weights
        k = min(neighbours, A_s.size)
        problem = (atoms, a, grid, b, k)

        g = np.zeros(A_s.size)
        reduced, _ = self._candidates(g, atoms, grid, k)
        voronoi = float(b @ reduced[:, 0])
        eps = max(voronoi, 1e-12 * A_s.dim) / 4.0

        best_lower, best_upper = 0.0, math.inf
        gap = math.inf
        for stage in range(1, _SEMIDUAL_STAGES + 1):
            g, _, info = fmin_l_bfgs_b(
                func=self._semidual_objective,
                x0=g,
                args=(eps,) + problem,
                maxiter=max_iter,
                pgtol=1e-12,
                factr=10.0,
            )
            lower, upper = self._semidual_bounds(g, eps, *problem)
            best_lower, best_upper = max(best_lower, lower), min(best_upper, upper)
            gap = math.sqrt(best_upper) - math.sqrt(best_lower)
            logger.debug(
                f"Semi-dual stage {stage}: eps={eps:.3e}, upper={best_upper:.6e}, gap={gap:.3e}, "
                f"iterations={info['nit']}"
            )
            if gap <= target_gap:
                distance = math.sqrt(best_upper)
                logger.debug(f"Semi-dual W2 on {A_s.size}x{B_s.size} atoms: {distance:.6g}")
                return distance
            eps *= 0.5

        logger.error(f"Semi-dual ladder ended with gap {gap:.3e} > {target_gap:.3e}")
        raise ConvergenceError(f"semi-dual ladder could not certify gap {target_gap:.3e} (reached {gap:.3e})")

    def _candidates(self, g: np.ndarray, atoms: np.ndarray, grid: np.ndarray, k: int):
        """
        (c_ji - g_i, i) for the k atoms with the smallest c_ji - g_i at every grid
        point, sorted ascending. grid carries a trailing zero column.
        """
        shift = float(g.max())
        lift = np.sqrt(np.maximum(shift - g, 0.0))
        box = np.append(np.ones(atoms.shape[1]), 2.0 * float(lift.max()) + 1.0)
        tree = cKDTree(np.column_stack([atoms, lift]), boxsize=box)
        dist, index = tree.query(grid, k=k)
        if k == 1:
            dist, index = dist[:, None], index[:, None]
        return dist**2 - shift, index

    def _semidual_objective(self, g, eps, atoms, a, grid, b, k):
        """Negated smoothed semi-dual and its gradient, in units of eps."""
        reduced, index = self._candidates(g, atoms, grid, k)
        scores = -reduced / eps
        lse = logsumexp(scores, axis=1)
        value = a @ g - eps * (b @ lse)
        share = np.exp(scores - lse[:, None]) * b[:, None]
        mass = np.bincount(index.ravel(), weights=share.ravel(), minlength=a.size)
        return -value / eps, -(a - mass) / eps

    def _semidual_bounds(self, g, eps, atoms, a, grid, b, k) -> Tuple[float, float]:
        """(lower, upper) bounds on W2^2 from the potentials g."""
        reduced, index = self._candidates(g, atoms, grid, k)
        lower = math.fsum(a * g) + math.fsum(b * reduced[:, 0])

        scores = -reduced / eps
        share = np.exp(scores - logsumexp(scores, axis=1)[:, None]) * b[:, None]
        mass = np.bincount(index.ravel(), weights=share.ravel(), minlength=a.size)
        share = share * np.minimum(1.0, a / np.maximum(mass, 1e-300))[index]
        cost = reduced + g[index]
        left_over = max(0.0, 1.0 - math.fsum(share.ravel()))
        upper = math.fsum((share * cost).ravel()) + 0.25 * atoms.shape[1] * left_over
        return lower, upper


# Singleton instance
transport_service = TransportService()
