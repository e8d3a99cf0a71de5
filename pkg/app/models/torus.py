"""
Torus Models

Points of the flat torus (R/Z)^d are plain float arrays: one point is a (d,) array,
a cloud is an (n, d) array, every coordinate wrapped into [0, 1).

Smooth functions on the torus are finite trigonometric series

    g(x) = offset + sum_j amp_j * cos(2 pi <freq_j, x> + phase_j)

DensityModel is the series with offset 1 whose amplitudes satisfy sum |amp_j| < 1,
so it is strictly positive with an exact upper envelope 1 + sum |amp_j|.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt

from app.exceptions import InvalidParameterError

# (d,) coordinates in [0, 1)
TorusPoint = npt.NDArray[np.float64]

TWO_PI = 2.0 * np.pi

# points per axis of the density positivity grid, and its total point budget
POSITIVITY_GRID = {1: 1024, 2: 128, 3: 48}
POSITIVITY_GRID_POINTS = 1 << 18


@dataclass(frozen=True)
class Mode:
    """One cosine mode amp * cos(2 pi <freq, x> + phase)."""

    amp: float
    freq: Tuple[int, ...]
    phase: float = 0.0


@dataclass(frozen=True)
class TrigSeries:
    """Finite trigonometric series on (R/Z)^dim with analytic derivatives."""

    dim: int
    modes: Tuple[Mode, ...] = ()
    offset: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidParameterError(f"dimension must be >= 1, got {self.dim}")
        modes = tuple(self.modes)
        for mode in modes:
            if len(mode.freq) != self.dim:
                raise InvalidParameterError(
                    f"mode frequency {mode.freq} does not have {self.dim} components"
                )
        object.__setattr__(self, "modes", modes)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([m.amp for m in self.modes], dtype=float)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([m.freq for m in self.modes], dtype=float).reshape(len(self.modes), self.dim)

    @property
    def phases(self) -> np.ndarray:
        return np.array([m.phase for m in self.modes], dtype=float)

    def _angles(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return TWO_PI * x @ self.frequencies.T + self.phases

    def value(self, x) -> np.ndarray:
        """Values at (n, d) points, shape (n,)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if not self.modes:
            return np.full(x.shape[0], self.offset)
        return self.offset + np.cos(self._angles(x)) @ self.amplitudes

    def gradient(self, x) -> np.ndarray:
        """Gradients at (n, d) points, shape (n, d)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if not self.modes:
            return np.zeros_like(x)
        weights = -TWO_PI * np.sin(self._angles(x)) * self.amplitudes
        return weights @ self.frequencies

    def hessian(self, x) -> np.ndarray:
        """Hessians at (n, d) points, shape (n, d, d)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if not self.modes:
            return np.zeros((x.shape[0], self.dim, self.dim))
        weights = -(TWO_PI**2) * np.cos(self._angles(x)) * self.amplitudes
        freqs = self.frequencies
        return np.einsum("nj,ja,jb->nab", weights, freqs, freqs)


@dataclass(frozen=True)
class DensityModel(TrigSeries):
    """
    Strictly positive smooth density f = 1 + sum_j amp_j cos(...).

    The series integrates to 1 over the unit torus whenever no mode has zero
    frequency. margin defaults to 1 - sum |amp_j| and must be positive.

    Positivity is checked twice: f is evaluated on a fine grid and must stay at
    or above margin there, and sum |amp_j| <= 1 - margin must hold so that the
    bound is guaranteed between grid points and the rejection envelope is exact.
    """

    offset: float = 1.0
    margin: Optional[float] = None

    def __post_init__(self):
        super().__post_init__()
        if self.offset != 1.0:
            raise InvalidParameterError("density offset is fixed to 1")
        total = float(np.sum(np.abs(self.amplitudes))) if self.modes else 0.0
        margin = self.margin if self.margin is not None else 1.0 - total
        if margin <= 0.0:
            raise InvalidParameterError(
                f"density not strictly positive: sum |amp| = {total:.6g}, margin = {margin:.6g}"
            )
        if self.modes:
            low = self.min_on_grid()
            if low < margin - 1e-12:
                raise InvalidParameterError(f"density reaches {low:.6g} on the positivity grid, below margin {margin:.6g}")
        if total > 1.0 - margin + 1e-15:
            raise InvalidParameterError(
                f"density not strictly positive: sum |amp| = {total:.6g}, margin = {margin:.6g}"
            )
        object.__setattr__(self, "margin", margin)

    @classmethod
    def uniform(cls, dim: int) -> "DensityModel":
        return cls(dim=dim, modes=())

    def min_on_grid(self, points_per_axis: Optional[int] = None) -> float:
        """
        Smallest value of f on the tensor grid i / N. N defaults to the
        per-dimension resolution, raised to 16 points per period of the fastest
        mode while the grid stays within its point budget.
        """
        if points_per_axis is None:
            fastest = max((max(abs(c) for c in m.freq) for m in self.modes), default=0)
            base = POSITIVITY_GRID.get(self.dim, 16)
            cap = int(POSITIVITY_GRID_POINTS ** (1.0 / self.dim))
            points_per_axis = max(8, min(max(base, 16 * fastest), cap))
        axis = np.arange(points_per_axis) / points_per_axis
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return float(np.min(self.value(np.stack([g.reshape(-1) for g in mesh], axis=1))))

    @property
    def is_uniform(self) -> bool:
        return all(m.amp == 0.0 for m in self.modes)

    @property
    def envelope(self) -> float:
        """sup f <= 1 + sum |amp_j|, the rejection-sampling envelope."""
        return 1.0 + (float(np.sum(np.abs(self.amplitudes))) if self.modes else 0.0)

    @property
    def lower_bound(self) -> float:
        return 1.0 - (float(np.sum(np.abs(self.amplitudes))) if self.modes else 0.0)


@dataclass(frozen=True)
class QuadGrid:
    """Cell-centred tensor grid with points_per_axis**dim equal weights."""

    points_per_axis: int
    dim: int

    def __post_init__(self):
        if self.points_per_axis < 1:
            raise InvalidParameterError("quadrature grid needs at least one point per axis")

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_axis

    @property
    def centers(self) -> np.ndarray:
        axis = (np.arange(self.points_per_axis) + 0.5) / self.points_per_axis
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        # power of two grids give exact sums; others sum to 1 within rounding
        return np.full(self.size, 1.0 / self.size)

    @property
    def half_cell_bound(self) -> float:
        """Largest distance from a point to its cell centre."""
        return float(np.sqrt(self.dim) / (2.0 * self.points_per_axis))


@dataclass(frozen=True)
class TargetMeasure:
    """The measure with density Z * f^exponent, exponent = 2 + 2/d."""

    model: DensityModel
    exponent: float
    normalizer: float
    grid: QuadGrid = field(repr=False)

    def density(self, x) -> np.ndarray:
        return self.normalizer * self.model.value(x) ** self.exponent
