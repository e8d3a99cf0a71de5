"""
Bound Models

Value types of the Stein-type error bound:

    FkParams        curvature rho and dimension d of the f_k(t) family
    ScalingParams   s, tau, T and the unit-ball moments V0, V2
    BoundTerms      the integrated discrepancies, tail moments and sup items
    AssembledBound  the bound for one reporting constant C, with truncation data
    AssumptionReport  the exponential-moment condition on the jumps
"""

import math
from dataclasses import dataclass, field
from typing import Dict

from app.exceptions import DivergentSeriesError, InvalidParameterError


@dataclass(frozen=True)
class FkParams:
    rho: float = 0.0
    dim: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidParameterError(f"dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class ScalingParams:
    """Time scales of the bound; for kNN runs s = tau and T = 1."""

    s: float
    tau: float
    T: float = 1.0
    v0: float = 0.0
    v2: float = 0.0

    def __post_init__(self):
        if self.s <= 0.0 or self.tau <= 0.0:
            raise InvalidParameterError(f"s and tau must be > 0 (s={self.s}, tau={self.tau})")
        if self.tau > self.T:
            raise InvalidParameterError(f"tau={self.tau} exceeds T={self.T}")


@dataclass(frozen=True)
class AssembledBound:
    value: float
    c_report: float
    tail_terms: Dict[int, float]
    k_truncation: int
    truncation_bound: float

    @property
    def upper(self) -> float:
        return self.value + self.truncation_bound


@dataclass(frozen=True)
class BoundTerms:
    """
    Discrepancy terms of one kernel against the diffusion (mode "nu" or "sup").

    moments[k] for k = 4..tail_cap is the aggregated a^{-1}-norm of M_k; orders above
    computed_order come from the radius bound (r_i^2 lambda_max(a^{-1}))^{k/2}.
    radius_bound is the largest per-point ratio between consecutive orders.
    """

    short_time: float
    drift_term: float
    diffusion_term: float
    third_term: float
    moments: Dict[int, float]
    sup_variants: Dict[int, float]
    scaling: ScalingParams
    mode: str
    computed_order: int
    radius_bound: float
    b_norm: float
    rho: float = 0.0
    tail_cap: int = 64
    tail_rel_tol: float = 1e-14
    _cache: Dict[float, AssembledBound] = field(default_factory=dict, repr=False, compare=False)

    def base(self) -> float:
        """Terms not multiplied by powers of C."""
        s, tau = self.scaling.s, self.scaling.tau
        return self.short_time + self.drift_term + self.diffusion_term + abs(math.log(tau)) / s * self.third_term

    def tail_weight(self, k: int, c_report: float) -> float:
        s, tau = self.scaling.s, self.scaling.tau
        log_w = (k - 1) * math.log(c_report) - math.log(s) - 0.5 * (math.lgamma(k + 1) + (k - 3) * math.log(tau))
        return math.exp(log_w)

    def assemble(self, c_report: float) -> AssembledBound:
        """
        C (base + sum_{k>=4} C^{k-1} / (s sqrt(k! tau^{k-3})) moment_k).

        The tail stops once a term past the computed orders falls below
        tail_rel_tol of the running sum, or at tail_cap. Remaining terms are bounded
        geometrically with ratio C R / sqrt((K+1) tau).

        Raises:
            DivergentSeriesError: terms still non-decreasing at the cap
        """
        if c_report <= 0.0:
            raise InvalidParameterError(f"C_report must be > 0, got {c_report}")
        if c_report in self._cache:
            return self._cache[c_report]

        tau = self.scaling.tau
        running = self.base()
        tail = {}
        previous = None
        k_trunc = 3
        converged = False
        for k in range(4, self.tail_cap + 1):
            term = self.tail_weight(k, c_report) * self.moments.get(k, 0.0)
            tail[k] = term
            running += term
            k_trunc = k
            if k > self.computed_order and term <= self.tail_rel_tol * running:
                converged = True
                break
            if k == self.tail_cap and previous is not None and term >= previous > 0.0:
                raise DivergentSeriesError("bound tail", self.tail_cap, term)
            previous = term

        ratio = c_report * self.radius_bound / math.sqrt((k_trunc + 1) * tau)
        last = tail.get(k_trunc, 0.0)
        if last == 0.0:
            remainder = 0.0
        elif ratio < 1.0:
            remainder = last * ratio / (1.0 - ratio)
        else:
            remainder = math.inf

        result = AssembledBound(
            value=c_report * running,
            c_report=c_report,
            tail_terms=tail,
            k_truncation=k_trunc if converged else self.tail_cap,
            truncation_bound=c_report * remainder,
        )
        self._cache[c_report] = result
        return result

    def assembled(self, c_report: float = 1.0) -> float:
        return self.assemble(c_report).value


@dataclass(frozen=True)
class AssumptionReport:
    """
    Exponential-moment condition on the kernel jumps.

    series_value is the nu-integral of the squared sup over t of
    sum_k f_k(t) |y - x|^k_{a^{-1}} / k!, truncated at k_truncation with
    truncation_bound covering the rest. gaussian_tail_value is the simpler
    Euclidean quantity sqrt(2/pi) (tau/d) E[exp(d e |y-x|^2 / tau) - 1];
    gaussian_exponent is d e r_M^2 / tau with the deterministic radius
    r_M = (2k / (n V0 min f))^{1/d}, empirical_exponent uses the mean realized r^2.
    """

    series_value: float
    truncation_bound: float
    k_truncation: int
    gaussian_tail_value: float
    gaussian_exponent: float
    empirical_exponent: float
    fk_constant: float
    time_grid_points: int
    finite: bool
