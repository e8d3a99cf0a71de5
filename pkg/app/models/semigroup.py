"""
Semigroup Lab Models

One-dimensional periodic generators on the grid x_i = i / N and the reports of the
numerical checks run against them.

A generator is stored in rate form

    (L phi)_i = up_i (phi_{i+1} - phi_i) + down_i (phi_{i-1} - phi_i)

so L annihilates constants exactly, whatever the rounding of the rates.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from app.exceptions import InvalidParameterError


@dataclass(frozen=True)
class Generator1D:
    """
    Discretised generator L phi = b phi' + a phi'' on the unit circle.

    mu holds the reversible (or invariant) density samples normalised to sum 1,
    so it doubles as the quadrature weight of integrals against mu.
    flux_form is True when the stencil was built from mu, in which case
    mu_i (L phi)_i is a discrete divergence and mu is exactly invariant.
    """

    a: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    up: np.ndarray
    down: np.ndarray
    flux_form: bool = False

    def __post_init__(self):
        n = self.a.shape[0]
        for name in ("b", "mu", "up", "down"):
            if getattr(self, name).shape != (n,):
                raise InvalidParameterError(f"generator field {name} must have shape ({n},)")

    @property
    def size(self) -> int:
        return self.a.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / self.size

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.size) / self.size

    @cached_property
    def matrix(self) -> sparse.csc_matrix:
        n = self.size
        idx = np.arange(n)
        rows = np.concatenate([idx, idx, idx])
        cols = np.concatenate([(idx + 1) % n, (idx - 1) % n, idx])
        vals = np.concatenate([self.up, self.down, -(self.up + self.down)])
        return sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """L phi for grid values of shape (N,) or (N, m)."""
        up = self.up if phi.ndim == 1 else self.up[:, None]
        down = self.down if phi.ndim == 1 else self.down[:, None]
        return up * (np.roll(phi, -1, axis=0) - phi) + down * (np.roll(phi, 1, axis=0) - phi)


@dataclass(frozen=True)
class SemigroupState:
    values: np.ndarray
    time: float

    def __post_init__(self):
        if self.time < 0.0:
            raise InvalidParameterError(f"elapsed time must be >= 0, got {self.time}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("semigroup state has non-finite values")


@dataclass(frozen=True)
class FisherTrace:
    """I_mu(nu_t) along the flow, with W2(nu, nu_T) at the final time."""

    times: np.ndarray
    values: np.ndarray
    w2: float

    def rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))


@dataclass(frozen=True)
class GradientBoundEntry:
    k: int
    t: float
    ratio: float
    lhs_max: float
    rhs_min: float


@dataclass(frozen=True)
class GradientBoundReport:
    entries: List[GradientBoundEntry]
    slack: float
    rho: float

    @property
    def max_ratio(self) -> float:
        return max((e.ratio for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1.0 + self.slack

    def ratio(self, k: int, t: float) -> float:
        for entry in self.entries:
            if entry.k == k and entry.t == t:
                return entry.ratio
        raise KeyError((k, t))


@dataclass(frozen=True)
class InterpolationReport:
    """
    (1 - c e^{-kappa T}) W2(nu, mu) <= integral_0^T I_mu(nu_t)^{1/2} dt.

    empirical_rate is the fitted exponential decay rate of W2(nu_t, mu); None when
    nu = mu.
    """

    T: float
    kappa: float
    c: float
    w2: float
    lhs: float
    rhs: float
    trace: FisherTrace = field(repr=False)
    empirical_rate: Optional[float] = None

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-12


@dataclass(frozen=True)
class TaylorReport:
    """Max truncation error of the order-K Taylor expansion of P_t phi over one grid shift."""

    t: float
    delta: float
    errors: Dict[int, float]


@dataclass(frozen=True)
class ShortTimeEntry:
    t: float
    lhs: float
    rhs: float


@dataclass(frozen=True)
class ShortTimeReport:
    entries: List[ShortTimeEntry]

    @property
    def passed(self) -> bool:
        return all(e.lhs <= e.rhs for e in self.entries)


@dataclass(frozen=True)
class LabRun:
    """Everything the lab computes for one generator and one test function."""

    generator: str
    grid_size: int
    rho: float
    spectral_gap: float
    gradient: GradientBoundReport
    interpolation: Optional[InterpolationReport] = None
    taylor: Optional[TaylorReport] = None
    short_time: Optional[ShortTimeReport] = None
