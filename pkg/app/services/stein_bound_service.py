"""
Stein Bound Service - Gradient Factors, Scalings and Discrepancy Terms

Bound on W2(pi, mu) for the invariant measure pi of a Markov kernel K against the
reversible measure mu of the diffusion L = b . grad + <a, hess>:

    C * [ tau ||b||_{nu} + sqrt(tau)
        + ||M1/s - b||_{nu}  + ||M2/(2s) - a||_{nu}  + |log tau|/s ||M3||_{nu}
        + sum_{k>=4} C^{k-1} / (s sqrt(k! tau^{k-3})) ||Mk||_{nu} ]

with every norm taken in the a^{-1}(X_i) metric and ||.||_nu the pi-weighted root
mean square over the data points (or the max over points in "sup" mode).

The regularization factors of the semigroup gradient bound

    ||grad^k P_t phi||_a <= f_k(t) sqrt(P_t ||grad phi||_a^2)

are evaluated in log space:

    rho != 0: f_k(t) = exp(-rho t max(1, k/2)) (rho d / (exp(2 rho t/(k-1)) - 1))^{(k-1)/2}
    rho == 0: f_k(t) = (d (k-1) / (2t))^{(k-1)/2}
    k == 1:   f_1(t) = exp(-rho t)
"""

import logging
import math
from typing import Dict, Iterable, Optional

import numpy as np
from scipy import integrate
from scipy.special import betaln, gammaln, logsumexp

from app.config.settings import settings
from app.exceptions import DivergentSeriesError, InvalidParameterError, RadiusTooLargeError
from app.models.bound import AssembledBound, AssumptionReport, BoundTerms, FkParams, ScalingParams
from app.models.kernel import MomentField, PointCloud, SparseKernel
from app.models.stationary import StationaryDistribution
from app.models.torus import DensityModel
from app.services.tensor_service import tensor_service
from app.services.torus_service import torus_service

logger = logging.getLogger(__name__)

# interpolation nodes for the jump-length series of the exponential-moment check
_SERIES_NODES = 1024
_EDGE_CHUNK = 1_000_000


class SteinBoundService:
    """f_k factors, kNN scalings, discrepancy terms, bound assembly and jump-moment checks."""

    def __init__(self):
        self.tensors = tensor_service
        self.torus = torus_service

    # =========================================================================
    # f_k(t)
    # =========================================================================

    def log_fk(self, k, t, params: FkParams) -> np.ndarray:
        """log f_k(t), broadcasting over k and t."""
        k = np.asarray(k, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0):
            raise InvalidParameterError("f_k(t) needs t > 0")
        if np.any(k < 1):
            raise InvalidParameterError("f_k(t) needs k >= 1")
        rho, d = float(params.rho), params.dim
        half = (k - 1.0) / 2.0
        km1 = np.where(k > 1, k - 1.0, 1.0)
        if rho == 0.0:
            body = half * np.log(d * km1 / (2.0 * t))
            return np.where(k > 1, body, 0.0)
        body = -rho * t * np.maximum(1.0, k / 2.0) + half * (
            np.log(abs(rho) * d) - np.log(np.abs(np.expm1(2.0 * rho * t / km1)))
        )
        return np.where(k > 1, body, -rho * t)

    def eval_fk(self, k: int, t: float, params: FkParams) -> float:
        """
        f_k(t) of the gradient bound.

        Raises:
            InvalidParameterError: t <= 0 or k < 1
        """
        return float(np.exp(self.log_fk(k, t, params)))

    def crude_fk_constant(self, params: FkParams, t_grid: Iterable[float], k_max: int) -> float:
        """
        Smallest C with f_k(t) t^{(k-1)/2} / sqrt(k!) <= C^k on the scanned grid.

        The scan over k <= k_max is joined with the k -> infinity limit of the k-th
        root, sqrt(d e / 2) exp(-rho t / 2), so the constant also covers large k.
        """
        t_grid = np.asarray(list(t_grid), dtype=float)
        ks = np.arange(1, k_max + 1, dtype=float)
        log_ratio = (
            self.log_fk(ks[:, None], t_grid[None, :], params)
            + (ks[:, None] - 1.0) / 2.0 * np.log(t_grid[None, :])
            - 0.5 * gammaln(ks[:, None] + 1.0)
        )
        scanned = float(np.max(log_ratio / ks[:, None]))
        limit = float(np.max(0.5 * np.log(params.dim * math.e / 2.0) - params.rho * t_grid / 2.0))
        return math.exp(max(scanned, limit))

    # =========================================================================
    # SCALINGS
    # =========================================================================

    def ball_moment(self, d: int, m: int) -> float:
        """V_m = integral of x_1^m over the unit ball of R^d."""
        if d < 1 or m < 0:
            raise InvalidParameterError(f"ball moment needs d >= 1 and m >= 0 (d={d}, m={m})")
        if m % 2 == 1:
            return 0.0
        # slice at height x_1 is a (d-1)-ball of radius sqrt(1 - x_1^2)
        log_value = (
            (d - 1) / 2.0 * math.log(math.pi)
            - gammaln((d + 1) / 2.0)
            + betaln((m + 1) / 2.0, (d + 1) / 2.0)
        )
        return math.exp(log_value)

    def knn_scaling(self, k: int, n: int, d: int, T: float = 1.0, tau: Optional[float] = None) -> ScalingParams:
        """
        s = tau = (k/n)^{2/d} V2 / V0^{1 + 2/d}, T = 1.

        Args:
            tau: optional override of tau (s is unchanged)
        """
        if not 1 <= k < n:
            raise InvalidParameterError(f"kNN scaling needs 1 <= k < n (k={k}, n={n})")
        v0 = self.ball_moment(d, 0)
        v2 = self.ball_moment(d, 2)
        s = (k / n) ** (2.0 / d) * v2 / v0 ** (1.0 + 2.0 / d)
        return ScalingParams(s=s, tau=tau if tau is not None else s, T=T, v0=v0, v2=v2)

    def predicted_rate(self, n: int, k: int, d: int) -> float:
        """sqrt(log n / k) (n/k)^{1/d} + (k/n)^{1/d}."""
        return math.sqrt(math.log(n) / k) * (n / k) ** (1.0 / d) + (k / n) ** (1.0 / d)

    def item_rates(self, n: int, k: int, d: int, m_max: int = 5) -> Dict[str, float]:
        """Envelopes of the sup items I1, I2, I3/s and I_m (m >= 4)."""
        rates = {
            "I1": self.predicted_rate(n, k, d),
            "I2": math.sqrt(math.log(n) / k) + (k / n) ** (2.0 / d),
            "I3_over_s": (k / n) ** (1.0 / d),
        }
        for m in range(4, m_max + 1):
            rates[f"I{m}"] = (k / n) ** (m / d)
        return rates

    # =========================================================================
    # DISCREPANCY TERMS
    # =========================================================================

    def discrepancy_terms(
        self,
        moments: MomentField,
        pi: StationaryDistribution,
        model: DensityModel,
        scaling: ScalingParams,
        params: FkParams,
        mode: str = "nu",
        tail_cap: Optional[int] = None,
    ) -> BoundTerms:
        """
        Integrated discrepancies between the kernel moments and the diffusion.

        Args:
            moments: jump moments up to m_max >= 4
            pi: invariant measure of the kernel (the nu of the integrals)
            model: density defining b and a
            scaling: s, tau
            params: rho and d (recorded with the terms)
            mode: "nu" (pi-weighted root mean square) or "sup" (max over points)

        Raises:
            RadiusTooLargeError: some kernel radius is >= 1/2
        """
        if mode not in ("nu", "sup"):
            raise InvalidParameterError(f"mode must be 'nu' or 'sup', got {mode!r}")
        if moments.m_max < 4:
            raise InvalidParameterError(f"discrepancy terms need moments up to order 4, got {moments.m_max}")
        worst = int(np.argmax(moments.radii))
        if moments.radii[worst] >= 0.5:
            logger.error(f"Kernel radius {moments.radii[worst]:.4g} >= 1/2 at point {worst}")
            raise RadiusTooLargeError(float(moments.radii[worst]), worst)
        tail_cap = tail_cap if tail_cap is not None else settings.tail_cap

        weights = np.asarray(pi.probabilities, dtype=float)
        s, tau, d = scaling.s, scaling.tau, moments.dim
        b, c = self.torus.coefficient_fields(model, moments.points)
        inv = 1.0 / c

        per_point = self._point_norms(moments, b, c, s)
        aggregate = self._aggregator(mode, weights)

        b_norm = aggregate(np.sqrt(np.sum(b**2, axis=1) * inv))
        reach = moments.radii * np.sqrt(inv)

        tail = {}
        for k in range(4, tail_cap + 1):
            tail[k] = aggregate(per_point[k] if k <= moments.m_max else reach**k)

        sup_variants = {m: float(np.max(per_point[m])) for m in range(1, moments.m_max + 1)}
        terms = BoundTerms(
            short_time=tau * b_norm + math.sqrt(tau),
            drift_term=aggregate(per_point[1]),
            diffusion_term=aggregate(per_point[2]),
            third_term=aggregate(per_point[3]),
            moments=tail,
            sup_variants=sup_variants,
            scaling=scaling,
            mode=mode,
            computed_order=moments.m_max,
            radius_bound=float(np.max(reach)),
            b_norm=b_norm,
            rho=params.rho,
            tail_cap=tail_cap,
            tail_rel_tol=settings.tail_rel_tol,
        )
        logger.debug(
            f"Discrepancy terms ({mode}): drift={terms.drift_term:.4g}, "
            f"diffusion={terms.diffusion_term:.4g}, third={terms.third_term:.4g}"
        )
        return terms

    def assemble_bound(self, terms: BoundTerms, scaling: Optional[ScalingParams] = None, c_report: Optional[float] = None) -> AssembledBound:
        """
        Bound value for the reporting constant C (default settings.report_constant).

        Raises:
            DivergentSeriesError: tail non-decreasing at the cap
        """
        c_report = c_report if c_report is not None else settings.report_constant
        if scaling is not None and scaling != terms.scaling:
            raise InvalidParameterError("scaling differs from the one the terms were computed with")
        try:
            result = terms.assemble(c_report)
        except DivergentSeriesError:
            logger.warning(f"Bound tail diverges at C={c_report}")
            raise
        if not math.isfinite(result.truncation_bound):
            logger.warning(f"Bound tail truncation at k={result.k_truncation} is not certified")
        return result

    def stein_factor(
        self,
        moments: MomentField,
        pi: StationaryDistribution,
        model: DensityModel,
        scaling: ScalingParams,
        params: FkParams,
        t: float,
        tail_cap: Optional[int] = None,
    ) -> float:
        """
        pi-root-mean-square of
        S(x, t) = f1 ||M1/s - b|| + f2 ||M2/(2s) - a|| + sum_{k>=3} f_k / (s k!) ||Mk||.
        """
        tail_cap = tail_cap if tail_cap is not None else settings.tail_cap
        s = scaling.s
        b, c = self.torus.coefficient_fields(model, moments.points)
        per_point = self._point_norms(moments, b, c, s)
        reach = moments.radii * np.sqrt(1.0 / c)

        ks = np.arange(1, tail_cap + 1)
        log_f = self.log_fk(ks, t, params)
        value = math.exp(log_f[0]) * per_point[1] + math.exp(log_f[1]) * per_point[2]
        for k in range(3, tail_cap + 1):
            norm = per_point[k] if k <= moments.m_max else reach**k
            value = value + np.exp(log_f[k - 1] - math.lgamma(k + 1)) / s * norm
        weights = np.asarray(pi.probabilities, dtype=float)
        return float(np.sqrt(np.sum(weights * value**2)))

    def integrated_stein_bound(
        self,
        moments: MomentField,
        pi: StationaryDistribution,
        model: DensityModel,
        scaling: ScalingParams,
        params: FkParams,
        T: Optional[float] = None,
        n_t: Optional[int] = None,
    ) -> float:
        """
        int_tau^T stein_factor dt (trapezoid on a log grid) plus
        int_0^tau (f1(t) ||b||_nu + f2(t) sqrt(d)) dt.
        """
        T = T if T is not None else scaling.T
        n_t = n_t if n_t is not None else settings.fk_time_grid_points
        tau, d = scaling.tau, moments.dim
        times = np.geomspace(tau, T, n_t) if T > tau else np.array([tau])
        values = np.array([self.stein_factor(moments, pi, model, scaling, params, t) for t in times])
        late = float(integrate.trapezoid(values, times)) if times.size > 1 else 0.0

        b, c = self.torus.coefficient_fields(model, moments.points)
        weights = np.asarray(pi.probabilities, dtype=float)
        b_norm = float(np.sqrt(np.sum(weights * np.sum(b**2, axis=1) / c)))

        def short(u: float) -> float:
            # t = u^2 removes the t^{-1/2} singularity of f2 at 0
            t = max(u * u, 1e-300)
            f1 = math.exp(float(self.log_fk(1, t, params)))
            f2 = math.exp(float(self.log_fk(2, t, params)))
            return 2.0 * u * (f1 * b_norm + f2 * math.sqrt(d))

        early, _ = integrate.quad(short, 0.0, math.sqrt(tau))
        return late + early

    # =========================================================================
    # EXPONENTIAL MOMENTS OF THE JUMPS
    # =========================================================================

    def empirical_exponent(self, kernel: SparseKernel, scaling: ScalingParams, d: int) -> float:
        """
        d e mean(r_i^2) / tau over the realized kNN radii r_i.

        This is the exponent inside the Gaussian-tail quantity for a typical jump.
        For uniform f the mean squared kNN radius scales like (k/n)^{2/d} up to
        O(1/k), and so does tau = (k/n)^{2/d} V2 / V0^{1+2/d}; the value stays put
        along a sweep only when tau was built from the same k as the kernel.

        Raises:
            InvalidParameterError: the kernel carries no radii
        """
        if kernel.radii is None:
            raise InvalidParameterError("empirical exponent needs a kernel with realized radii")
        return d * math.e * float(np.mean(np.asarray(kernel.radii) ** 2)) / scaling.tau

    def assumption3_check(
        self,
        kernel: SparseKernel,
        cloud: PointCloud,
        model: DensityModel,
        params: FkParams,
        scaling: ScalingParams,
        pi: StationaryDistribution,
        k_max: Optional[int] = None,
        n_t: Optional[int] = None,
    ) -> AssumptionReport:
        """
        nu-integral of the squared sup over t in [tau, T] of the jump series
        sum_{k=1}^{k_max} f_k(t) |y - x|^k_{a^{-1}(x)} / k!, plus the Gaussian-tail quantity.

        The sup over t uses n_t log-spaced times; the series as a function of the jump
        length is tabulated on a log grid and interpolated in log-log coordinates.

        Raises:
            DivergentSeriesError: the geometric tail beyond k_max is not summable
        """
        k_max = k_max if k_max is not None else settings.series_k_max
        n_t = n_t if n_t is not None else settings.fk_time_grid_points
        tau, T, d = scaling.tau, scaling.T, cloud.dim
        times = np.geomspace(tau, T, n_t) if T > tau else np.array([tau])
        fk_constant = self.crude_fk_constant(params, times, k_max)

        # first pass: range of positive jump lengths
        shortest, longest = math.inf, 0.0
        for lengths, _, _ in self._edge_chunks(kernel, cloud, model, pi):
            positive = lengths[lengths > 0]
            if positive.size:
                shortest = min(shortest, float(positive.min()))
                longest = max(longest, float(positive.max()))

        if longest > 0.0:
            ratio = fk_constant * longest / math.sqrt((k_max + 2) * tau)
            if ratio >= 1.0:
                logger.error(f"Jump series not summable beyond k={k_max} (ratio {ratio:.3g})")
                raise DivergentSeriesError("jump moment", k_max, ratio)
            nodes = np.geomspace(shortest, longest, _SERIES_NODES) if longest > shortest else np.array([longest])
            log_series = self._log_series_sup(nodes, times, params, k_max)

        series_value = 0.0
        truncation = 0.0
        gaussian_sum = 0.0
        for lengths, euclid, weights in self._edge_chunks(kernel, cloud, model, pi):
            gaussian_sum += float(np.sum(weights * np.expm1(d * math.e * euclid**2 / tau)))
            positive = lengths > 0
            if longest == 0.0 or not np.any(positive):
                continue
            log_len = np.log(lengths[positive])
            if nodes.size > 1:
                series = np.exp(np.interp(log_len, np.log(nodes), log_series))
            else:
                series = np.full(log_len.size, math.exp(log_series[0]))

            # sum_{k > k_max} sqrt(tau) x^k / sqrt(k!) with x = C l / sqrt(tau), geometric in k
            x = fk_constant * lengths[positive] / math.sqrt(tau)
            first = np.exp((k_max + 1) * np.log(x) - 0.5 * math.lgamma(k_max + 2) + 0.5 * math.log(tau))
            tail = first / (1.0 - x / math.sqrt(k_max + 2))

            w = weights[positive]
            series_value += float(np.sum(w * series**2))
            truncation += float(np.sum(w * (2.0 * series * tail + tail**2)))

        gaussian = math.sqrt(2.0 / math.pi) * (tau / d) * gaussian_sum
        n, k = kernel.n, kernel.denominator
        r_m = (2.0 * k / (n * scaling.v0 * model.lower_bound)) ** (1.0 / d) if scaling.v0 > 0 else 0.0
        report = AssumptionReport(
            series_value=series_value,
            truncation_bound=truncation,
            k_truncation=k_max,
            gaussian_tail_value=gaussian,
            gaussian_exponent=d * math.e * r_m**2 / tau,
            empirical_exponent=self.empirical_exponent(kernel, scaling, d) if kernel.radii is not None else 0.0,
            fk_constant=fk_constant,
            time_grid_points=int(times.size),
            finite=bool(math.isfinite(series_value) and math.isfinite(gaussian)),
        )
        logger.info(
            f"Jump-moment check: series={series_value:.4g} (truncation {truncation:.2e}), "
            f"gaussian={gaussian:.4g}"
        )
        return report

    # =========================================================================
    # HELPERS
    # =========================================================================

    def _point_norms(self, moments: MomentField, b: np.ndarray, c: np.ndarray, s: float) -> Dict[int, np.ndarray]:
        """Per-point a^{-1}-norms of M1/s - b, M2/(2s) - a and M_m for m >= 3."""
        d = moments.dim
        inv = 1.0 / c
        drift = moments.moments[1] / s - b
        identity = np.eye(d).reshape(-1)
        diffusion = moments.moments[2] / (2.0 * s) - c[:, None] * identity[None, :]
        norms = {
            1: self.tensors.field_norms(drift, inv, 1),
            2: self.tensors.field_norms(diffusion, inv, 2),
        }
        for m in range(3, moments.m_max + 1):
            norms[m] = self.tensors.field_norms(moments.moments[m], inv, m)
        return norms

    def _aggregator(self, mode: str, weights: np.ndarray):
        if mode == "sup":
            return lambda values: float(np.max(values))
        return lambda values: float(np.sqrt(np.sum(weights * values**2)))

    def _log_series_sup(self, nodes: np.ndarray, times: np.ndarray, params: FkParams, k_max: int) -> np.ndarray:
        ks = np.arange(1, k_max + 1, dtype=float)
        coeff = self.log_fk(ks[None, :], times[:, None], params) - gammaln(ks + 1.0)[None, :]
        logs = coeff[None, :, :] + ks[None, None, :] * np.log(nodes)[:, None, None]
        return np.max(logsumexp(logs, axis=2), axis=1)

    def _edge_chunks(self, kernel: SparseKernel, cloud: PointCloud, model: DensityModel, pi: StationaryDistribution):
        """
        Yields (a^{-1}(x)-lengths, Euclidean lengths, nu(dx) K(x, dy) weights) of the
        kernel edges, a block of whole rows at a time.
        """
        pts = cloud.points
        row_len = np.diff(kernel.indptr)
        probs = np.asarray(pi.probabilities, dtype=float)
        factor = self.torus.conformal_factor(model, pts)
        rows_per_chunk = max(1, _EDGE_CHUNK // max(1, int(row_len.max())))
        for start in range(0, kernel.n, rows_per_chunk):
            stop = min(kernel.n, start + rows_per_chunk)
            lo, hi = kernel.indptr[start], kernel.indptr[stop]
            owners = np.repeat(np.arange(start, stop), row_len[start:stop])
            jumps = self.torus.min_image(pts[owners], pts[kernel.indices[lo:hi]])
            euclid = np.linalg.norm(jumps, axis=1)
            weights = probs[owners] * kernel.counts[lo:hi] / kernel.denominator
            yield euclid * factor[owners], euclid, weights


# Singleton instance
stein_bound_service = SteinBoundService()
