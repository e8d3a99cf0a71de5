"""
Transport Models
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from app.exceptions import InvalidParameterError


@dataclass(frozen=True)
class DiscreteMeasure:
    """
    Finitely supported probability measure on the torus.

    proxy_bound records how far (in W2) the measure may be from whatever it
    approximates, e.g. the half-cell bound of a grid discretisation.
    """

    atoms: np.ndarray
    weights: np.ndarray
    proxy_bound: float = 0.0

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape[0] != atoms.shape[0]:
            raise InvalidParameterError(f"{atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if np.any(weights < 0.0):
            raise InvalidParameterError("measure weights must be non-negative")
        if abs(math.fsum(weights) - 1.0) > 1e-12:
            raise InvalidParameterError(f"measure weights sum to {math.fsum(weights)!r}, expected 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, atoms, weights, proxy_bound: float = 0.0) -> "DiscreteMeasure":
        weights = np.asarray(weights, dtype=float)
        return cls(atoms, weights / math.fsum(weights), proxy_bound)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def support(self) -> "DiscreteMeasure":
        """The measure restricted to atoms of positive weight."""
        keep = self.weights > 0.0
        if np.all(keep):
            return self
        return DiscreteMeasure.normalized(self.atoms[keep], self.weights[keep], self.proxy_bound)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling of two discrete measures as a sparse flow matrix."""

    flows: sparse.coo_matrix
    cost: float

    def marginals(self):
        csr = self.flows.tocsr()
        return np.asarray(csr.sum(axis=1)).reshape(-1), np.asarray(csr.sum(axis=0)).reshape(-1)

    def triplets(self):
        coo = self.flows.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))
