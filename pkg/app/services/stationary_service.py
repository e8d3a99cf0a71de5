"""
Stationary Service - Invariant Measure of a Sparse Markov Kernel

pi K = pi is solved by power iteration from the uniform vector:

    pi_{t+1} = K^T pi_t,     residual_t = || pi_t K - pi_t ||_1

Uniqueness is checked first: the invariant probability is unique iff the support
digraph has exactly one closed communicating class. Several closed classes are an
error, never a silent pick.

Periodic closed classes (no self loop anywhere in the class) would make the
iteration oscillate, so the lazy kernel (K + I)/2 is used instead; it has the same
fixed points.
"""

import logging
import math
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from app.config.settings import settings
from app.exceptions import InvalidParameterError, MaxIterExceededError, MultipleClosedClassesError
from app.models.kernel import PointCloud, SparseKernel
from app.models.stationary import CommClassReport, StationaryDistribution

logger = logging.getLogger(__name__)

DIRECT_SOLVE_MAX_N = 4096
# floor of the default iteration cap; 10 n log n alone is too small for tiny chains
MIN_ITERATIONS = 1000


class StationaryService:
    """
    Communicating classes, invariant measures and density estimates.

    Flow of stationary_distribution:
    1. Condense the support digraph into communicating classes
    2. Refuse kernels with more than one closed class
    3. Switch to the lazy kernel when the closed class is periodic
    4. Power-iterate until the l1 residual drops below tol

    Error handling:
    - Non-uniqueness and non-convergence raise, carrying the closed classes or
      the last residual; nothing is returned half-converged
    - direct_solve is size-limited and exists only to cross-check small kernels
    """

    def communicating_classes(self, kernel: SparseKernel) -> CommClassReport:
        """SCC condensation of the support digraph; a class is closed iff no edge leaves it."""
        graph = kernel.to_csr()
        n_classes, labels = connected_components(graph, directed=True, connection="strong")

        # relabel classes in order of their smallest state so output is deterministic
        first_seen = {}
        for state, label in enumerate(labels):
            first_seen.setdefault(int(label), len(first_seen))
        labels = np.array([first_seen[int(lab)] for lab in labels], dtype=np.int64)

        classes = [[] for _ in range(n_classes)]
        for state, label in enumerate(labels):
            classes[label].append(state)

        rows = np.repeat(np.arange(kernel.n), np.diff(kernel.indptr))
        leaving = labels[rows] != labels[kernel.indices]
        open_classes = set(labels[rows[leaving]].tolist())
        closed = [c not in open_classes for c in range(n_classes)]
        return CommClassReport(labels=labels, classes=classes, closed=closed)

    def stationary_distribution(self, kernel: SparseKernel, tol: Optional[float] = None, max_iter: Optional[int] = None) -> StationaryDistribution:
        """
        Invariant probability vector by power iteration.

        Args:
            kernel: row-stochastic kernel
            tol: l1 residual target (default settings.stationary_tol)
            max_iter: iteration cap (default max(10 n log n, 1000))

        Raises:
            MultipleClosedClassesError: invariant measure is not unique
            MaxIterExceededError: residual still above tol at the cap
        """
        tol = tol if tol is not None else settings.stationary_tol
        if tol <= 0.0:
            raise InvalidParameterError(f"tol must be > 0, got {tol}")
        n = kernel.n
        if max_iter is None:
            max_iter = settings.stationary_max_iter or max(
                MIN_ITERATIONS, int(math.ceil(10 * n * math.log(max(n, 2))))
            )

        report = self.communicating_classes(kernel)
        closed = report.closed_classes
        if len(closed) != 1:
            logger.error(f"Kernel has {len(closed)} closed classes")
            raise MultipleClosedClassesError(closed)

        matrix_t = kernel.to_csr().T.tocsr()
        loops = kernel.has_self_loop()
        lazy = not bool(np.any(loops[closed[0]]))
        method = "lazy-power" if lazy else "power"
        if lazy:
            logger.warning("Closed class has no self loop; iterating the lazy kernel (K + I) / 2")

        pi = np.full(n, 1.0 / n)
        residual = math.inf
        for iteration in range(max_iter + 1):
            image = matrix_t @ pi
            residual = math.fsum(np.abs(image - pi))
            if residual <= tol:
                logger.info(f"Stationary distribution: n={n}, iterations={iteration}, residual={residual:.3e}")
                return StationaryDistribution(pi, residual, iteration, method)
            if iteration == max_iter:
                break
            nxt = 0.5 * (image + pi) if lazy else image
            pi = nxt / math.fsum(nxt)

        logger.error(f"Power iteration stopped at {max_iter} iterations, residual {residual:.3e}")
        raise MaxIterExceededError(max_iter, residual, tol)

    def invariance_residual(self, pi, kernel: SparseKernel, matrix_t=None) -> float:
        """|| pi K - pi ||_1 with compensated summation."""
        pi = np.asarray(pi, dtype=float)
        if matrix_t is None:
            matrix_t = kernel.to_csr().T.tocsr()
        return math.fsum(np.abs(matrix_t @ pi - pi))

    def direct_solve(self, kernel: SparseKernel) -> StationaryDistribution:
        """
        Sparse linear solve of (K^T - I) pi = 0 with one equation replaced by sum(pi) = 1.

        Cross-check for power iteration on small kernels.
        """
        n = kernel.n
        if n > DIRECT_SOLVE_MAX_N:
            raise InvalidParameterError(f"direct solve limited to n <= {DIRECT_SOLVE_MAX_N}, got {n}")
        report = self.communicating_classes(kernel)
        if not report.is_unique:
            raise MultipleClosedClassesError(report.closed_classes)
        system = (kernel.to_csr().T - sparse.identity(n)).tolil()
        system[n - 1, :] = np.ones(n)
        rhs = np.zeros(n)
        rhs[n - 1] = 1.0
        pi = spsolve(system.tocsc(), rhs)
        pi = np.maximum(pi, 0.0)
        pi = pi / math.fsum(pi)
        return StationaryDistribution(pi, self.invariance_residual(pi, kernel), 0, "direct")

    def estimate_density(self, pi: StationaryDistribution, cloud: PointCloud) -> np.ndarray:
        """
        Density estimate at the data points from the invariant measure.

        pi_i tracks f^{2+2/d} / f = f^{(d+2)/d} evaluated at X_i up to a constant, so
        f_hat(X_i) is proportional to pi_i^{d/(d+2)}; the constant makes
        (1/n) sum_i 1/f_hat(X_i) = 1, the sample version of the unit torus volume.
        """
        probs = np.asarray(pi.probabilities, dtype=float)
        if probs.shape[0] != cloud.n:
            raise InvalidParameterError("stationary vector and cloud sizes differ")
        if np.any(probs <= 0.0):
            raise InvalidParameterError("density estimate needs a strictly positive invariant measure")
        d = cloud.dim
        raw = probs ** (d / (d + 2.0))
        return raw * float(np.mean(1.0 / raw))


# Singleton instance
stationary_service = StationaryService()
