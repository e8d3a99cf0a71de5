"""
Semigroup Service - 1-D Periodic Diffusion Laboratory

Numerical checks of the semigroup side of the Stein bound on the unit circle:

    build_generator        central (or flux-form) stencil of L = b d/dx + a d^2/dx^2
    evolve                 P_t u by Crank-Nicolson
    gradient_bound_check   |d^k P_t phi|_a <= f_k(t) sqrt(P_t |phi'|^2_a)
    spectral_gap           kappa, smallest nonzero eigenvalue of -L in L^2(mu)
    fisher_information     I_mu(h mu) = integral a ((log h)')^2 h dmu
    interp_inequality_check
                           (1 - e^{-kappa T}) W2(nu, mu) <= integral_0^T I_mu(nu_t)^{1/2} dt
    gamma_ops              carre du champ and its iterate
    estimate_rho_hessian   curvature of the Bakry-Emery case a = I, b = -grad V
    taylor_check           analyticity of P_t phi over one grid shift
    short_time_bound       I_mu(nu_t)^{1/2} <= f_1(t) |b|_{L^2(nu)} + f_2(t) sqrt(d)

Derivatives of evolved fields are spectral (FFT); the stencil is only used inside L.
"""

import logging
import math
from typing import Callable, Dict, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, linalg, sparse
from scipy.sparse import linalg as sparse_linalg

from app.config.settings import settings
from app.exceptions import (
    InvalidParameterError,
    NonPositiveValueError,
    SizeLimitExceededError,
    UnsupportedGeneratorError,
)
from app.models.bound import FkParams
from app.models.semigroup import (
    FisherTrace,
    Generator1D,
    GradientBoundEntry,
    GradientBoundReport,
    InterpolationReport,
    LabRun,
    SemigroupState,
    ShortTimeEntry,
    ShortTimeReport,
    TaylorReport,
)
from app.models.tensor import MetricMatrix
from app.models.torus import DensityModel, TrigSeries
from app.models.transport import DiscreteMeasure
from app.services.stein_bound_service import stein_bound_service
from app.services.transport_service import transport_service

logger = logging.getLogger(__name__)

GridFunction = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]

MAX_DENSE_EIGEN = 2048
DEFAULT_DT = 1e-4
_TRACE_POINTS = 64
_RATE_POINTS = 8


class SemigroupService:
    """Generators, Crank-Nicolson evolution and the gradient / Fisher checks."""

    def __init__(self):
        self.bounds = stein_bound_service
        self.transport = transport_service

    # =========================================================================
    # GENERATORS
    # =========================================================================

    def build_generator(
        self,
        a: GridFunction,
        b: Optional[GridFunction],
        size: int,
        mu: Optional[GridFunction] = None,
    ) -> Generator1D:
        """
        Periodic stencil of L phi = b phi' + a phi'' on x_i = i / size.

        Without mu the stencil is central differences and mu is derived as the
        invariant vector of the discrete operator. With mu the stencil is the flux
        form (1/mu)(mu a phi')', whose drift is b = a' + a (log mu)'; a supplied b is
        only checked against it.

        Raises:
            NonPositiveValueError: a <= 0 somewhere on the grid
        """
        if size < 8:
            raise InvalidParameterError(f"generator grid needs at least 8 points, got {size}")
        x = np.arange(size) / size
        h = 1.0 / size
        a_vals = self._sample(a, x)
        if np.any(a_vals <= 0.0):
            raise NonPositiveValueError(f"diffusion coefficient must be > 0, min is {a_vals.min():.6g}")

        if mu is None:
            b_vals = self._sample(b if b is not None else 0.0, x)
            up = a_vals / h**2 + b_vals / (2.0 * h)
            down = a_vals / h**2 - b_vals / (2.0 * h)
            if np.any(up < 0.0) or np.any(down < 0.0):
                logger.warning("Central stencil has negative rates; refine the grid for a Markov discretisation")
            gen = Generator1D(a=a_vals, b=b_vals, mu=np.full(size, 1.0 / size), up=up, down=down)
            return Generator1D(a=a_vals, b=b_vals, mu=self._invariant_vector(gen), up=up, down=down)

        mu_vals = self._sample(mu, x)
        if np.any(mu_vals <= 0.0):
            raise NonPositiveValueError("reversible density must be > 0")
        mu_vals = mu_vals / math.fsum(mu_vals)
        flux = 0.5 * (mu_vals * a_vals + np.roll(mu_vals * a_vals, -1))
        up = flux / (mu_vals * h**2)
        down = np.roll(flux, 1) / (mu_vals * h**2)
        implied = self.derivative(a_vals, 1) + a_vals * self.derivative(np.log(mu_vals), 1)
        if b is not None:
            b_vals = self._sample(b, x)
            gap = float(np.max(np.abs(b_vals - implied)))
            if gap > 1e-6 * max(1.0, float(np.max(np.abs(implied)))):
                logger.warning(f"Supplied drift differs from the flux-form drift by {gap:.3e}")
        else:
            b_vals = implied
        return Generator1D(a=a_vals, b=b_vals, mu=mu_vals, up=up, down=down, flux_form=True)

    def heat_generator(self, size: Optional[int] = None) -> Generator1D:
        """a = 1, b = 0."""
        return self.build_generator(1.0, 0.0, size or settings.lab_grid_size)

    def reversible_generator(self, model: DensityModel, size: Optional[int] = None) -> Generator1D:
        """
        The conformal pair of the kNN limit in d = 1: a = f^{-2} / 2,
        b = f^{-2} (log f)', reversible for mu proportional to f^4.
        """
        if model.dim != 1:
            raise InvalidParameterError(f"reversible generator is one-dimensional, model has d={model.dim}")
        size = size or settings.lab_grid_size
        x = np.arange(size) / size

        f = model.value(x[:, None])
        df = model.gradient(x[:, None])[:, 0]
        return self.build_generator(0.5 / f**2, df / f**3, size, mu=f**4)

    def bakry_emery_generator(self, potential: TrigSeries, size: Optional[int] = None) -> Generator1D:
        """a = 1, b = -u', reversible for mu proportional to exp(-u)."""
        if potential.dim != 1:
            raise InvalidParameterError("Bakry-Emery generator is one-dimensional")
        size = size or settings.lab_grid_size
        x = (np.arange(size) / size)[:, None]
        u = potential.value(x)
        return self.build_generator(1.0, -potential.gradient(x)[:, 0], size, mu=np.exp(-(u - u.min())))

    # =========================================================================
    # EVOLUTION
    # =========================================================================

    def evolve(self, gen: Generator1D, u0: GridFunction, t: float, dt: Optional[float] = None) -> SemigroupState:
        """
        P_t u0 by Crank-Nicolson with ceil(t/dt) equal steps.

        Raises:
            InvalidParameterError: dt <= 0 or t < 0
        """
        dt = dt if dt is not None else DEFAULT_DT
        if dt <= 0.0:
            raise InvalidParameterError(f"time step must be > 0, got {dt}")
        if t < 0.0:
            raise InvalidParameterError(f"evolution time must be >= 0, got {t}")
        values = self._sample(u0, gen.grid)
        return SemigroupState(values=self._propagate(gen, values, t, dt, {}), time=float(t))

    def evolve_many(self, gen: Generator1D, u0: GridFunction, times: Sequence[float], dt: Optional[float] = None) -> Dict[float, np.ndarray]:
        """P_t u0 at every requested time, stepping through them in increasing order."""
        dt = dt if dt is not None else DEFAULT_DT
        if dt <= 0.0:
            raise InvalidParameterError(f"time step must be > 0, got {dt}")
        values = self._sample(u0, gen.grid)
        cache = {}
        out = {}
        current = 0.0
        for t in sorted(set(float(t) for t in times)):
            if t < 0.0:
                raise InvalidParameterError(f"evolution time must be >= 0, got {t}")
            values = self._propagate(gen, values, t - current, dt, cache)
            current = t
            out[t] = values
        return out

    def _propagate(self, gen: Generator1D, values: np.ndarray, t: float, dt: float, cache: dict) -> np.ndarray:
        if t <= 0.0:
            return values.copy()
        steps = max(1, math.ceil(t / dt - 1e-9))
        step = t / steps
        key = round(step, 15)
        if key not in cache:
            identity = sparse.identity(gen.size, format="csc")
            lhs = (identity - 0.5 * step * gen.matrix).tocsc()
            cache[key] = sparse_linalg.splu(lhs)
        lu = cache[key]
        for _ in range(steps):
            values = lu.solve(values + 0.5 * step * gen.apply(values))
        return values

    # =========================================================================
    # DERIVATIVES
    # =========================================================================

    def derivative(self, values: np.ndarray, order: int) -> np.ndarray:
        """order-th derivative of periodic grid values by trigonometric interpolation."""
        if order == 0:
            return np.asarray(values, dtype=float).copy()
        n = values.shape[0]
        coeffs = np.fft.rfft(values, axis=0)
        freqs = np.fft.rfftfreq(n, d=1.0 / n)
        multiplier = (2j * np.pi * freqs) ** order
        if n % 2 == 0 and order % 2 == 1:
            multiplier[-1] = 0.0
        if values.ndim > 1:
            multiplier = multiplier[:, None]
        return np.fft.irfft(coeffs * multiplier, n=n, axis=0)

    # =========================================================================
    # GRADIENT BOUNDS
    # =========================================================================

    def gradient_bound_check(
        self,
        gen: Generator1D,
        phi: GridFunction,
        rho: float,
        t_list: Iterable[float],
        k_max: int = 3,
        slack: Optional[float] = None,
        dim: int = 1,
        fk: Optional[Callable[[int, float, FkParams], float]] = None,
        dt: Optional[float] = None,
    ) -> GradientBoundReport:
        """
        Max over the grid of |d^k P_t phi| a^{k/2} / (f_k(t) sqrt(P_t(a phi'^2))) per (k, t).

        Args:
            fk: replacement for the f_k(t) evaluator
        """
        if not 1 <= k_max <= 3:
            raise InvalidParameterError(f"gradient bounds are checked for k <= 3, got k_max={k_max}")
        slack = slack if slack is not None else settings.gradient_slack
        fk = fk or self.bounds.eval_fk
        params = FkParams(rho=rho, dim=dim)
        t_list = [float(t) for t in t_list]

        values = self._sample(phi, gen.grid)
        energy = gen.a * self.derivative(values, 1) ** 2
        evolved = self.evolve_many(gen, np.column_stack([values, energy]), t_list, dt)
        scale = max(1.0, float(np.max(np.abs(energy))))

        entries = []
        for t in t_list:
            u, pe = evolved[t][:, 0], evolved[t][:, 1]
            root = np.sqrt(np.maximum(pe, 0.0))
            for k in range(1, k_max + 1):
                lhs = np.abs(self.derivative(u, k)) * gen.a ** (k / 2.0)
                rhs = fk(k, t, params) * root
                meaningful = root > 1e-10 * math.sqrt(scale)
                if not np.any(meaningful):
                    ratio = 0.0
                else:
                    ratio = float(np.max(lhs[meaningful] / rhs[meaningful]))
                entries.append(
                    GradientBoundEntry(
                        k=k,
                        t=t,
                        ratio=ratio,
                        lhs_max=float(lhs.max()),
                        rhs_min=float(rhs.min()),
                    )
                )
        report = GradientBoundReport(entries=entries, slack=slack, rho=rho)
        logger.info(f"Gradient bound check: max ratio {report.max_ratio:.4f} (pass={report.passed})")
        return report

    # =========================================================================
    # SPECTRAL GAP
    # =========================================================================

    def spectral_gap(self, gen: Generator1D) -> float:
        """
        Smallest nonzero eigenvalue of -L in L^2(mu), from the dense symmetrised
        operator D^{1/2} L D^{-1/2} (its mu-symmetric part for non-reversible stencils).

        Raises:
            SizeLimitExceededError: more than 2048 grid points
        """
        if gen.size > MAX_DENSE_EIGEN:
            raise SizeLimitExceededError(f"dense eigensolve limited to {MAX_DENSE_EIGEN} points, got {gen.size}")
        root = np.sqrt(gen.mu)
        dense = gen.matrix.toarray()
        sym = root[:, None] * dense / root[None, :]
        sym = 0.5 * (sym + sym.T)
        eigenvalues = linalg.eigh(-sym, eigvals_only=True, subset_by_index=[0, 1])
        gap = float(eigenvalues[1])
        logger.debug(f"Spectral gap on {gen.size} points: {gap:.6g}")
        return gap

    # =========================================================================
    # FISHER INFORMATION
    # =========================================================================

    def fisher_information(self, gen: Generator1D, h: GridFunction) -> float:
        """
        Integral of a ((log h)')^2 h dmu, h the density of nu with respect to mu.

        Raises:
            NonPositiveValueError: h <= 0 somewhere
        """
        values = self._sample(h, gen.grid)
        if np.any(values <= 0.0):
            raise NonPositiveValueError("Fisher information needs a strictly positive density")
        slope = self.derivative(np.log(values), 1)
        return math.fsum(gen.mu * values * gen.a * slope**2)

    def fisher_trace(self, gen: Generator1D, h: GridFunction, T: float, n_t: int = _TRACE_POINTS, dt: Optional[float] = None) -> FisherTrace:
        """I_mu(nu_t) on 0 and a log-spaced grid up to T, with W2(nu, nu_T)."""
        values = self._sample(h, gen.grid)
        times = self._trace_times(T, n_t)
        evolved = self.evolve_many(gen, values, times, dt)
        info = np.array([self.fisher_information(gen, evolved[t]) for t in times])
        w2 = self.w2_density(gen, values, evolved[times[-1]])
        return FisherTrace(times=np.asarray(times), values=info, w2=w2)

    def w2_density(self, gen: Generator1D, h0: np.ndarray, h1: np.ndarray) -> float:
        """
        W2 between h0 mu and h1 mu in the metric of a.

        Grid points are mapped to their arclength s(x) = integral a^{-1/2}, which
        turns the a-metric circle into a flat circle of length s(1).
        """
        inv_root = gen.a ** -0.5
        steps = 0.5 * (inv_root + np.roll(inv_root, -1)) * gen.spacing
        length = math.fsum(steps)
        positions = np.concatenate([[0.0], np.cumsum(steps)[:-1]]) / length
        A = DiscreteMeasure.normalized(positions, gen.mu * h0)
        B = DiscreteMeasure.normalized(positions, gen.mu * h1)
        distance, _ = self.transport.exact_w2(A, B)
        return length * distance

    # =========================================================================
    # INTERPOLATION INEQUALITY
    # =========================================================================

    def interp_inequality_check(self, gen: Generator1D, h: GridFunction, T: float, n_t: int = _TRACE_POINTS, dt: Optional[float] = None) -> InterpolationReport:
        """
        (1 - c e^{-kappa T}) W2(nu, mu) against the trapezoid integral of I^{1/2}
        with c = 1 and kappa the spectral gap. For reversible generators the
        density of nu_t with respect to mu is P_t h.
        """
        if T <= 0.0:
            raise InvalidParameterError(f"T must be > 0, got {T}")
        values = self._sample(h, gen.grid)
        kappa = self.spectral_gap(gen)
        c = 1.0

        times = self._trace_times(T, n_t)
        evolved = self.evolve_many(gen, values, times, dt)
        info = np.array([self.fisher_information(gen, evolved[t]) for t in times])
        rhs = float(integrate.trapezoid(np.sqrt(info), np.asarray(times)))

        ones = np.ones(gen.size)
        w2 = self.w2_density(gen, values, ones)
        lhs = (1.0 - c * math.exp(-kappa * T)) * w2
        trace = FisherTrace(times=np.asarray(times), values=info, w2=self.w2_density(gen, values, evolved[times[-1]]))

        rate = None
        if w2 > 1e-12:
            rate_times = times[-_RATE_POINTS:]
            distances = np.array([self.w2_density(gen, evolved[t], ones) for t in rate_times])
            keep = distances > 1e-12
            if np.count_nonzero(keep) >= 2:
                slope, _ = np.polyfit(np.asarray(rate_times)[keep], np.log(distances[keep]), 1)
                rate = float(-slope)

        report = InterpolationReport(T=T, kappa=kappa, c=c, w2=w2, lhs=lhs, rhs=rhs, trace=trace, empirical_rate=rate)
        logger.info(f"Interpolation check T={T}: lhs={lhs:.6g}, rhs={rhs:.6g}, holds={report.holds}")
        return report

    def _trace_times(self, T: float, n_t: int) -> list:
        return [0.0] + np.geomspace(T * 1e-4, T, n_t).tolist()

    # =========================================================================
    # GAMMA CALCULUS
    # =========================================================================

    def gamma_ops(self, gen: Generator1D, phi: GridFunction, psi: GridFunction):
        """
        Gamma_1(phi, psi) = a phi' psi' and
        Gamma_2(phi, psi) = 1/2 (L Gamma_1(phi, psi) - Gamma_1(L phi, psi) - Gamma_1(phi, L psi)).
        """
        phi = self._sample(phi, gen.grid)
        psi = self._sample(psi, gen.grid)

        def gamma1(u, v):
            return gen.a * self.derivative(u, 1) * self.derivative(v, 1)

        g1 = gamma1(phi, psi)
        g2 = 0.5 * (gen.apply(g1) - gamma1(gen.apply(phi), psi) - gamma1(phi, gen.apply(psi)))
        return g1, g2

    def estimate_rho_hessian(
        self,
        potential: TrigSeries,
        grid_res: Optional[int] = None,
        diffusion: Optional[Union[float, MetricMatrix]] = None,
    ) -> float:
        """
        min over a grid of the smallest Hessian eigenvalue of V, the curvature of
        L = Laplacian - grad V . grad.

        Raises:
            UnsupportedGeneratorError: a diffusion matrix other than the identity
        """
        if diffusion is not None:
            identity = (
                diffusion == 1.0
                if isinstance(diffusion, (int, float))
                else np.allclose(diffusion.entries, np.eye(diffusion.dim))
            )
            if not identity:
                raise UnsupportedGeneratorError("curvature estimate only covers a = I with b = -grad V")
        grid_res = grid_res or settings.lab_grid_size
        axis = np.arange(grid_res) / grid_res
        mesh = np.meshgrid(*([axis] * potential.dim), indexing="ij")
        points = np.stack([g.reshape(-1) for g in mesh], axis=1)
        hess = potential.hessian(points)
        return float(np.min(np.linalg.eigvalsh(hess)[:, 0]))

    # =========================================================================
    # ANALYTICITY AND SHORT TIME
    # =========================================================================

    def taylor_check(self, gen: Generator1D, phi: GridFunction, t: float, k_max: int = 6, shift: int = 4, dt: Optional[float] = None) -> TaylorReport:
        """
        P_t phi(x + delta) - P_t phi(x) against its Taylor polynomials of order
        1..k_max, delta = shift grid cells.
        """
        u = self.evolve(gen, phi, t, dt).values
        delta = shift * gen.spacing
        increment = np.roll(u, -shift) - u
        approx = np.zeros_like(u)
        errors = {}
        for k in range(1, k_max + 1):
            approx = approx + delta**k * self.derivative(u, k) / math.factorial(k)
            errors[k] = float(np.max(np.abs(increment - approx)))
        return TaylorReport(t=t, delta=delta, errors=errors)

    def short_time_bound(
        self,
        gen: Generator1D,
        h: GridFunction,
        t_list: Iterable[float],
        rho: float = 0.0,
        dim: int = 1,
        dt: Optional[float] = None,
    ) -> ShortTimeReport:
        """I_mu(nu_t)^{1/2} against f_1(t) |b|_{L^2(nu, a^{-1})} + f_2(t) sqrt(d), nu = h mu."""
        values = self._sample(h, gen.grid)
        params = FkParams(rho=rho, dim=dim)
        drift = math.sqrt(math.fsum(gen.mu * values * gen.b**2 / gen.a) / math.fsum(gen.mu * values))
        t_list = [float(t) for t in t_list]
        evolved = self.evolve_many(gen, values, t_list, dt)
        entries = []
        for t in t_list:
            lhs = math.sqrt(self.fisher_information(gen, evolved[t]))
            rhs = self.bounds.eval_fk(1, t, params) * drift + self.bounds.eval_fk(2, t, params) * math.sqrt(dim)
            entries.append(ShortTimeEntry(t=t, lhs=lhs, rhs=rhs))
        return ShortTimeReport(entries=entries)

    # =========================================================================
    # LAB RUN
    # =========================================================================

    def build_named(
        self,
        generator: str,
        size: Optional[int] = None,
        model: Optional[DensityModel] = None,
        potential: Optional[TrigSeries] = None,
    ) -> Generator1D:
        """heat, reversible (needs a 1-D density) or bakry_emery (needs a potential)."""
        if generator == "heat":
            return self.heat_generator(size)
        if generator == "reversible":
            if model is None:
                raise InvalidParameterError("reversible generator needs a density model")
            return self.reversible_generator(model, size)
        if generator == "bakry_emery":
            if potential is None:
                raise InvalidParameterError("bakry_emery generator needs a potential")
            return self.bakry_emery_generator(potential, size)
        raise InvalidParameterError(f"unknown generator {generator!r}")

    def run_lab(
        self,
        generator: str,
        phi: GridFunction,
        t_list: Sequence[float],
        k_max: int = 3,
        size: Optional[int] = None,
        model: Optional[DensityModel] = None,
        potential: Optional[TrigSeries] = None,
        rho: Optional[float] = None,
        h: Optional[GridFunction] = None,
        T: Optional[float] = None,
        fk: Optional[Callable[[int, float, FkParams], float]] = None,
    ) -> LabRun:
        """
        Gradient bounds, spectral gap, Taylor errors and the short-time Fisher bound
        for one generator; the interpolation inequality too when T is given.

        rho defaults to the Hessian estimate for bakry_emery, 0 for heat and the
        configured default otherwise.
        """
        size = size or settings.lab_grid_size
        gen = self.build_named(generator, size, model, potential)
        if rho is None:
            if generator == "bakry_emery":
                rho = self.estimate_rho_hessian(potential, size)
            elif generator == "heat":
                rho = 0.0
            else:
                rho = settings.default_rho
        h = h if h is not None else (lambda x: 1.0 + 0.5 * np.cos(2.0 * np.pi * x))

        gradient = self.gradient_bound_check(gen, phi, rho, t_list, k_max=k_max, fk=fk)
        gap = self.spectral_gap(gen) if size <= MAX_DENSE_EIGEN else math.nan
        interpolation = self.interp_inequality_check(gen, h, T) if T is not None else None
        taylor = self.taylor_check(gen, phi, min(t_list))
        short_time = self.short_time_bound(gen, h, t_list, rho=rho)
        logger.info(f"Lab run for {generator} (N={size}): gap={gap:.6g}, max gradient ratio {gradient.max_ratio:.4f}")
        return LabRun(
            generator=generator,
            grid_size=size,
            rho=rho,
            spectral_gap=gap,
            gradient=gradient,
            interpolation=interpolation,
            taylor=taylor,
            short_time=short_time,
        )

    # =========================================================================
    # HELPERS
    # =========================================================================

    def _sample(self, fn: GridFunction, x: np.ndarray) -> np.ndarray:
        if callable(fn):
            values = np.asarray(fn(x), dtype=float)
        else:
            values = np.asarray(fn, dtype=float)
        if values.ndim == 0:
            return np.full(x.shape[0], float(values))
        if values.shape[0] != x.shape[0]:
            raise InvalidParameterError(f"grid function has {values.shape[0]} values for {x.shape[0]} points")
        return values.astype(float, copy=True)

    def _invariant_vector(self, gen: Generator1D) -> np.ndarray:
        """Null vector of L^T normalised to sum 1."""
        system = gen.matrix.T.tolil()
        system[gen.size - 1, :] = np.ones(gen.size)
        rhs = np.zeros(gen.size)
        rhs[-1] = 1.0
        mu = sparse_linalg.spsolve(system.tocsc(), rhs)
        if np.any(mu <= 0.0):
            logger.warning("Derived invariant density has non-positive entries; clipping")
            mu = np.maximum(mu, 1e-300)
        return mu / math.fsum(mu)


# Singleton instance
semigroup_service = SemigroupService()
