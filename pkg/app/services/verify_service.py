"""
Verify Service - Acceptance Suite

Runs the acceptance criteria and reports each one exactly once with its measured
values:

    1  kernel / stationary correctness on random clouds
    2  uniform-density sanity sweep (d = 1)
    3  W2 rate on the default sweep (d = 2, one-mode density)
    4  sup item envelopes on the same sweep
    5  gradient bounds of the semigroup
    6  f_k constant stability
    7  Fisher-information interpolation inequality
    8  transport solver agreement and triangle inequality
    9  exponential moments of the jumps

Profiles:
    full    the sizes stated with each criterion
    quick   reduced sizes for tests and smoke runs (same checks, looser statistics)
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from app.exceptions import MultipleClosedClassesError
from app.models.bound import FkParams
from app.models.kernel import PointCloud
from app.models.torus import DensityModel, Mode, TrigSeries
from app.models.transport import DiscreteMeasure
from app.repositories.artifact_repository import artifact_repository
from app.schemas.density import DensityModelSchema
from app.schemas.experiment import CriterionResult, KRule, ResultRow, SweepConfig, VerifyVerdict
from app.services.experiment_service import experiment_service
from app.services.kernel_service import kernel_service
from app.services.semigroup_service import semigroup_service
from app.services.stationary_service import stationary_service
from app.services.stein_bound_service import stein_bound_service
from app.services.torus_service import torus_service
from app.services.transport_service import transport_service

logger = logging.getLogger(__name__)

FkEvaluator = Callable[[int, float, FkParams], float]


@dataclass(frozen=True)
class Profile:
    name: str
    clouds: int
    cloud_max_n: int
    uniform_n: Tuple[int, ...]
    uniform_seeds: int
    sweep_n: Tuple[int, ...]
    sweep_seeds: int
    brute_instances: int
    entropic_instances: int
    triangle_instances: int


PROFILES: Dict[str, Profile] = {
    "full": Profile(
        name="full",
        clouds=50,
        cloud_max_n=512,
        uniform_n=(512, 8192),
        uniform_seeds=5,
        sweep_n=(2000, 4000, 8000, 16000),
        sweep_seeds=5,
        brute_instances=200,
        entropic_instances=20,
        triangle_instances=100,
    ),
    "quick": Profile(
        name="quick",
        clouds=8,
        cloud_max_n=128,
        uniform_n=(256, 4096),
        uniform_seeds=2,
        sweep_n=(500, 1000, 2000),
        sweep_seeds=2,
        brute_instances=20,
        entropic_instances=2,
        triangle_instances=10,
    ),
}

ONE_MODE_DENSITY = DensityModelSchema.model_validate({"dim": 2, "modes": [{"amp": 0.3, "freq": [1, 0]}]})
# realized kNN radii fluctuate with O(1/k) bias and sampling noise
EMPIRICAL_EXPONENT_SPREAD = 0.05


class VerifyService:
    """
    Acceptance criteria and the verdict.

    Each criterion is a check_* method returning (passed, measured). verify_suite
    runs them in order and never stops early: a criterion that raises becomes a
    failed entry with the exception text, and the next one still runs.

    The uniform and one-mode sweeps are shared by several criteria, so their rows
    are cached per (profile, config hash) for the lifetime of the service.
    """

    def __init__(self):
        self._sweep_cache: Dict[Tuple[str, str], List[ResultRow]] = {}

    # =========================================================================
    # SUITE
    # =========================================================================

    def verify_suite(self, profile: str = "full", out_dir: Optional[str] = None, fk: Optional[FkEvaluator] = None) -> VerifyVerdict:
        """
        Runs every criterion; a criterion that raises is reported as failed with the error.

        Args:
            fk: replacement f_k evaluator for the gradient-bound criterion
        """
        prof = self.profile(profile)
        checks = [
            (1, "kernel and stationary correctness", lambda: self.check_kernels(prof)),
            (2, "uniform density sanity", lambda: self.check_uniform(prof)),
            (3, "W2 rate on the default sweep", lambda: self.check_rate(prof)),
            (4, "sup item envelopes", lambda: self.check_items(prof)),
            (5, "semigroup gradient bounds", lambda: self.check_gradient_bounds(fk=fk)),
            (6, "f_k constant stability", self.check_fk_constant),
            (7, "Fisher interpolation inequality", self.check_interpolation),
            (8, "transport solvers", lambda: self.check_transport(prof)),
            (9, "exponential moments of the jumps", lambda: self.check_jump_moments(prof)),
        ]
        results = [self._run(cid, name, check) for cid, name, check in checks]
        verdict = VerifyVerdict(profile=prof.name, passed=all(r.passed for r in results), criteria=results)
        if out_dir is not None:
            artifact_repository.write_json(Path(out_dir) / f"verify-{prof.name}.json", verdict)
        logger.info(f"Verify ({prof.name}): {sum(r.passed for r in results)}/{len(results)} criteria passed")
        return verdict

    def profile(self, name: str) -> Profile:
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return PROFILES[name]

    def _run(self, cid: int, name: str, check: Callable[[], Tuple[bool, dict]]) -> CriterionResult:
        started = time.perf_counter()
        try:
            passed, measured = check()
            error = None
        except Exception as exc:
            logger.error(f"Criterion {cid} raised {type(exc).__name__}: {exc}")
            passed, measured, error = False, {}, f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        logger.info(f"Criterion {cid} ({name}): {'PASS' if passed else 'FAIL'} in {elapsed:.1f}s")
        return CriterionResult(id=cid, name=name, passed=bool(passed), measured=measured, runtime_s=elapsed, error=error)

    # =========================================================================
    # 1. KERNELS
    # =========================================================================

    def check_kernels(self, prof: Profile) -> Tuple[bool, dict]:
        rng = torus_service.rng(2024, (1,))
        worst_residual, worst_gap, resampled = 0.0, 0.0, 0
        stochastic = True
        for index in range(prof.clouds):
            d = 1 + index % 2
            n = int(rng.integers(16, prof.cloud_max_n + 1))
            k = int(rng.integers(2, min(n - 1, 32) + 1))
            model = DensityModel.uniform(d)
            for attempt in range(20):
                cloud = PointCloud(torus_service.sample(model, n, seed=index, stream=(1, attempt)))
                kernel = kernel_service.build_kernel(cloud, k, strict=False)
                try:
                    pi = stationary_service.stationary_distribution(kernel)
                except MultipleClosedClassesError:
                    resampled += 1
                    continue
                break
            else:
                return False, {"error": f"cloud {index} kept several closed classes"}

            totals = np.add.reduceat(kernel.counts, kernel.indptr[:-1])
            stochastic &= bool(np.all(totals == kernel.denominator))
            direct = stationary_service.direct_solve(kernel)
            worst_residual = max(worst_residual, pi.residual)
            worst_gap = max(worst_gap, float(np.sum(np.abs(pi.probabilities - direct.probabilities))))

        passed = stochastic and worst_residual <= 1e-12 and worst_gap <= 1e-8
        return passed, {
            "clouds": prof.clouds,
            "row_stochastic": stochastic,
            "max_residual": worst_residual,
            "max_direct_gap": worst_gap,
            "resampled": resampled,
        }

    # =========================================================================
    # 2-4. SWEEPS
    # =========================================================================

    def uniform_config(self, prof: Profile) -> SweepConfig:
        return SweepConfig(
            d=1,
            n_values=list(prof.uniform_n),
            k_rule=KRule(kind="power", alpha=0.75),
            seeds=prof.uniform_seeds,
        )

    def default_config(self, prof: Profile) -> SweepConfig:
        return SweepConfig(
            d=2,
            density=ONE_MODE_DENSITY,
            n_values=list(prof.sweep_n),
            k_rule=KRule(kind="power", alpha=0.75),
            seeds=prof.sweep_seeds,
        )

    def sweep_rows(self, config: SweepConfig, prof: Profile) -> List[ResultRow]:
        key = (prof.name, config.config_hash())
        if key not in self._sweep_cache:
            self._sweep_cache[key] = [experiment_service.run_cell(config, n, k, seed) for n, k, seed in config.cells()]
        return self._sweep_cache[key]

    def check_uniform(self, prof: Profile) -> Tuple[bool, dict]:
        config = self.uniform_config(prof)
        rows = self.sweep_rows(config, prof)
        ok = [r for r in rows if r.succeeded]
        means = experiment_service.seed_means(ok, "n", "w2_torus")
        small, large = float(min(prof.uniform_n)), float(max(prof.uniform_n))
        worst = max((r.w2_torus for r in ok), default=math.inf)
        passed = (
            len(ok) == len(rows)
            and small in means
            and large in means
            and means[large] < means[small]
            and worst <= 0.1
        )
        return passed, {
            "mean_w2": {str(int(n)): v for n, v in means.items()},
            "max_w2": worst,
            "failed_cells": len(rows) - len(ok),
        }

    def check_rate(self, prof: Profile) -> Tuple[bool, dict]:
        config = self.default_config(prof)
        rows = [r for r in self.sweep_rows(config, prof) if r.succeeded]
        means = experiment_service.seed_means(rows, "n", "w2_torus")
        predicted = {r.n: r.predicted_rate for r in rows}
        ordered = [means[n] for n in sorted(means)]
        decreasing = len(ordered) == len(prof.sweep_n) and all(b < a for a, b in zip(ordered, ordered[1:]))
        spread = experiment_service.rate_ratio_spread(means, predicted)
        return decreasing and spread <= 5.0, {
            "mean_w2": {str(int(n)): v for n, v in means.items()},
            "ratio_spread": spread,
            "successful_cells": len(rows),
        }

    def check_items(self, prof: Profile) -> Tuple[bool, dict]:
        config = self.default_config(prof)
        rows = [r for r in self.sweep_rows(config, prof) if r.succeeded]
        if not rows:
            return False, {"error": "no successful cells"}
        k_of = {r.n: r.k for r in rows}
        constants = experiment_service.item_constants(rows, k_of, config.d)
        spreads = {item: max(v.values()) / min(v.values()) for item, v in constants.items() if v}
        dominated = all(
            r.sup_I1 >= r.drift_term and r.sup_I2 >= r.diffusion_term and r.sup_I4 >= r.moment_4 for r in rows
        )
        return dominated and all(s <= 3.0 for s in spreads.values()), {
            "constants": {item: {str(n): c for n, c in v.items()} for item, v in constants.items()},
            "spreads": spreads,
            "sup_dominates_nu": dominated,
        }

    # =========================================================================
    # 5-7. SEMIGROUP
    # =========================================================================

    def check_gradient_bounds(self, fk: Optional[FkEvaluator] = None, size: int = 512) -> Tuple[bool, dict]:
        potential = TrigSeries(dim=1, modes=(Mode(amp=0.1, freq=(1,)),))
        generators = {
            "heat": (semigroup_service.heat_generator(size), 0.0),
            "bakry_emery": (
                semigroup_service.bakry_emery_generator(potential, size),
                semigroup_service.estimate_rho_hessian(potential, size),
            ),
        }
        test_functions = {
            "sin": lambda x: np.sin(2 * np.pi * x),
            "sin+cos": lambda x: np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * x),
        }
        ratios = {}
        for gname, (gen, rho) in generators.items():
            for fname, phi in test_functions.items():
                report = semigroup_service.gradient_bound_check(
                    gen, phi, rho, [0.005, 0.02, 0.1], k_max=3, slack=0.05, fk=fk
                )
                ratios[f"{gname}/{fname}"] = report.max_ratio
        worst = max(ratios.values())
        return worst <= 1.05, {"max_ratio": worst, "ratios": ratios}

    def check_fk_constant(self) -> Tuple[bool, dict]:
        t_grid = np.geomspace(1e-3, 1.0, 32)
        changes = {}
        finite = True
        for rho in (-1.0, 0.0, 1.0):
            for d in (1, 2, 3):
                params = FkParams(rho=rho, dim=d)
                c100 = stein_bound_service.crude_fk_constant(params, t_grid, 100)
                c200 = stein_bound_service.crude_fk_constant(params, t_grid, 200)
                finite &= math.isfinite(c100) and math.isfinite(c200)
                changes[f"rho={rho:g},d={d}"] = abs(c200 / c100 - 1.0)
        return finite and max(changes.values()) < 0.01, {"relative_change": changes}

    def check_interpolation(self) -> Tuple[bool, dict]:
        gen = semigroup_service.heat_generator(512)
        h = lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x)  # noqa: E731
        measured = {}
        passed = True
        for T in (0.05, 0.2):
            report = semigroup_service.interp_inequality_check(gen, h, T)
            measured[f"T={T:g}"] = {"lhs": report.lhs, "rhs": report.rhs, "slack": report.slack}
            passed &= report.holds
            measured["kappa"] = report.kappa
        kappa_error = abs(measured["kappa"] / (4 * np.pi**2) - 1.0)
        measured["kappa_relative_error"] = kappa_error
        return passed and kappa_error <= 0.02, measured

    # =========================================================================
    # 8. TRANSPORT
    # =========================================================================

    def check_transport(self, prof: Profile) -> Tuple[bool, dict]:
        rng = torus_service.rng(2024, (8,))

        brute_gap = 0.0
        for _ in range(prof.brute_instances):
            d = int(rng.integers(1, 3))
            size = int(rng.integers(1, 8))
            A = DiscreteMeasure.uniform(rng.random((size, d)))
            B = DiscreteMeasure.uniform(rng.random((size, d)))
            exact, _ = transport_service.exact_w2(A, B)
            brute_gap = max(brute_gap, abs(exact - transport_service.brute_force_w2(A, B)))

        entropic_excess = 0.0
        below_exact = False
        for _ in range(prof.entropic_instances):
            d = int(rng.integers(1, 3))
            A = DiscreteMeasure.uniform(rng.random((200, d)))
            B = DiscreteMeasure.uniform(rng.random((200, d)))
            exact, _ = transport_service.exact_w2(A, B)
            approx = transport_service.entropic_w2(A, B, target_gap=0.005 * exact)
            below_exact |= approx < exact - 1e-12
            entropic_excess = max(entropic_excess, approx / exact - 1.0)

        triangle_violation = 0.0
        for _ in range(prof.triangle_instances):
            d = int(rng.integers(1, 3))
            measures = []
            for _ in range(3):
                size = int(rng.integers(1, 12))
                measures.append(DiscreteMeasure.normalized(rng.random((size, d)), 0.1 + rng.random(size)))
            ab = transport_service.exact_w2(measures[0], measures[1])[0]
            bc = transport_service.exact_w2(measures[1], measures[2])[0]
            ac = transport_service.exact_w2(measures[0], measures[2])[0]
            triangle_violation = max(triangle_violation, ac - ab - bc)

        passed = brute_gap <= 1e-12 and not below_exact and entropic_excess <= 0.01 and triangle_violation <= 1e-9
        return passed, {
            "max_brute_gap": brute_gap,
            "max_entropic_excess": entropic_excess,
            "entropic_below_exact": below_exact,
            "max_triangle_violation": triangle_violation,
        }

    # =========================================================================
    # 9. JUMP MOMENTS
    # =========================================================================

    def check_jump_moments(self, prof: Profile) -> Tuple[bool, dict]:
        """
        Series finite with a negligible truncation bound on every cell, and the
        Gaussian-tail exponent (n, k)-invariant for uniform f. The closed form
        d e r_M^2 / tau is constant by construction; the exponent from the
        realized radii is what can drift, and does as soon as tau and the
        kernel disagree on k.
        """
        measured = {}
        finite = True
        derived, realized = [], []
        for density, label in ((ONE_MODE_DENSITY.to_model(), "one-mode"), (DensityModel.uniform(2), "uniform")):
            for n in prof.sweep_n:
                k = math.ceil(n**0.75)
                cloud = PointCloud(torus_service.sample(density, n, 0, stream=(n,)))
                kernel = kernel_service.build_kernel(cloud, k)
                pi = stationary_service.stationary_distribution(kernel)
                scaling = stein_bound_service.knn_scaling(k, n, 2)
                report = stein_bound_service.assumption3_check(
                    kernel, cloud, density, FkParams(0.0, 2), scaling, pi
                )
                finite &= report.finite and report.truncation_bound < 1e-12 * report.series_value
                measured[f"{label}/n={n}"] = {
                    "series_value": report.series_value,
                    "truncation_bound": report.truncation_bound,
                    "gaussian_exponent": report.gaussian_exponent,
                    "empirical_exponent": report.empirical_exponent,
                }
                if label == "uniform":
                    derived.append(report.gaussian_exponent)
                    realized.append(report.empirical_exponent)
        derived_spread = max(derived) / min(derived) - 1.0
        realized_spread = max(realized) / min(realized) - 1.0
        measured["gaussian_exponent_spread"] = derived_spread
        measured["empirical_exponent_spread"] = realized_spread
        return finite and derived_spread < 0.01 and realized_spread < EMPIRICAL_EXPONENT_SPREAD, measured


# Singleton instance
verify_service = VerifyService()
