import math

import numpy as np
import pytest

from app.exceptions import InvalidParameterError, RadiusTooLargeError
from app.models.bound import FkParams, ScalingParams
from app.models.kernel import MomentField, PointCloud, SparseKernel
from app.models.stationary import StationaryDistribution
from app.models.torus import DensityModel
from app.services.kernel_service import kernel_service
from app.services.stein_bound_service import stein_bound_service
from app.services.torus_service import torus_service


def uniform_pi(n):
    return StationaryDistribution(np.full(n, 1.0 / n), 0.0, 0, "direct")


def matched_moments(model, points, s, radius=0.0):
    """Moments whose drift and diffusion agree exactly with the diffusion of model."""
    d = model.dim
    n = points.shape[0]
    b, c = torus_service.coefficient_fields(model, points)
    return MomentField(
        points=points,
        radii=np.full(n, radius),
        moments={
            1: s * b,
            2: 2.0 * s * c[:, None] * np.eye(d).reshape(1, -1),
            3: np.zeros((n, d**3)),
            4: np.zeros((n, d**4)),
        },
        m_max=4,
    )


def two_atom_field():
    cloud = PointCloud(np.array([[0.5], [0.6], [0.4]]))
    kernel = SparseKernel.from_rows([{1: 1, 2: 1}, {0: 2}, {0: 2}], denominator=2)
    pi = StationaryDistribution(np.array([1.0, 0.0, 0.0]), 0.0, 0, "direct")
    return kernel_service.kernel_moments(kernel, cloud, m_max=4), pi


# =============================================================================
# f_k(t)
# =============================================================================


def test_eval_fk_examples():
    assert stein_bound_service.eval_fk(1, 0.3, FkParams(0.0, 1)) == 1.0
    assert stein_bound_service.eval_fk(2, 0.5, FkParams(0.0, 2)) == pytest.approx(math.sqrt(2.0))
    expected = math.exp(-1.0) / math.sqrt(math.e**2 - 1.0)
    assert stein_bound_service.eval_fk(2, 1.0, FkParams(1.0, 1)) == pytest.approx(expected)
    assert expected == pytest.approx(0.14555, abs=1e-5)


@pytest.mark.parametrize("rho", [-2.0, 0.0, 0.7])
def test_log_space_matches_naive_formula(rho):
    params = FkParams(rho, 2)
    for k in range(1, 31):
        for t in (0.05, 0.3, 1.0):
            if k == 1:
                naive = math.exp(-rho * t)
            elif rho == 0.0:
                naive = (2 * (k - 1) / (2 * t)) ** ((k - 1) / 2)
            else:
                naive = math.exp(-rho * t * max(1.0, k / 2)) * (
                    rho * 2 / (math.exp(2 * rho * t / (k - 1)) - 1.0)
                ) ** ((k - 1) / 2)
            assert stein_bound_service.eval_fk(k, t, params) == pytest.approx(naive, rel=1e-10)


def test_eval_fk_stays_finite_for_large_k():
    assert math.isfinite(stein_bound_service.eval_fk(200, 0.01, FkParams(0.0, 3)))


def test_eval_fk_preconditions():
    with pytest.raises(InvalidParameterError):
        stein_bound_service.eval_fk(2, 0.0, FkParams())
    with pytest.raises(InvalidParameterError):
        stein_bound_service.eval_fk(0, 1.0, FkParams())


def test_crude_fk_constant_is_stable():
    params = FkParams(0.0, 1)
    grid = np.geomspace(1e-3, 1.0, 32)
    c100 = stein_bound_service.crude_fk_constant(params, grid, 100)
    c200 = stein_bound_service.crude_fk_constant(params, grid, 200)
    assert c100 >= 1.0
    assert abs(c200 - c100) / c100 < 0.01
    for k in (1, 5, 40, 150):
        ratio = ((k - 1) / 2) ** ((k - 1) / 2) / math.sqrt(math.factorial(k))
        assert ratio <= c200**k * (1 + 1e-9)


# =============================================================================
# SCALINGS
# =============================================================================


def test_ball_moments():
    assert stein_bound_service.ball_moment(1, 1) == 0.0
    assert stein_bound_service.ball_moment(1, 0) == pytest.approx(2.0)
    assert stein_bound_service.ball_moment(1, 2) == pytest.approx(2.0 / 3.0)
    assert stein_bound_service.ball_moment(2, 2) == pytest.approx(math.pi / 4)
    for d in (1, 2, 3, 5):
        v0 = stein_bound_service.ball_moment(d, 0)
        assert v0 == pytest.approx(math.pi ** (d / 2) / math.gamma(d / 2 + 1))
        assert stein_bound_service.ball_moment(d, 2) == pytest.approx(v0 / (d + 2))


def test_knn_scaling():
    scaling = stein_bound_service.knn_scaling(100, 10_000, 2)
    assert scaling.s == pytest.approx(0.01 / (4 * math.pi))
    assert scaling.tau == scaling.s
    assert scaling.T == 1.0

    assert stein_bound_service.knn_scaling(50, 100, 1).s == pytest.approx(0.25 * (2 / 3) / 8)
    assert stein_bound_service.knn_scaling(200, 20_000, 2).s == pytest.approx(scaling.s, rel=1e-14)

    with pytest.raises(InvalidParameterError):
        stein_bound_service.knn_scaling(100, 100, 2)


def test_predicted_rate_and_items():
    n, k, d = 4096, 256, 2
    rate = math.sqrt(math.log(n) / k) * (n / k) ** 0.5 + (k / n) ** 0.5
    assert stein_bound_service.predicted_rate(n, k, d) == pytest.approx(rate)
    items = stein_bound_service.item_rates(n, k, d, m_max=5)
    assert set(items) == {"I1", "I2", "I3_over_s", "I4", "I5"}
    assert items["I4"] == pytest.approx((k / n) ** 2)


# =============================================================================
# DISCREPANCY TERMS AND ASSEMBLY
# =============================================================================


def test_matched_moments_have_no_discrepancy(one_mode_2d):
    points = np.random.default_rng(0).random((40, 2))
    s = 0.003
    terms = stein_bound_service.discrepancy_terms(
        matched_moments(one_mode_2d, points, s, radius=0.02),
        uniform_pi(40),
        one_mode_2d,
        ScalingParams(s=s, tau=s),
        FkParams(0.0, 2),
    )
    assert terms.drift_term == pytest.approx(0.0, abs=1e-10)
    assert terms.diffusion_term == pytest.approx(0.0, abs=1e-10)
    assert terms.third_term == 0.0
    assert terms.moments[4] == 0.0


def test_two_atom_kernel_terms():
    moments, pi = two_atom_field()
    model = DensityModel.uniform(1)
    matched = stein_bound_service.discrepancy_terms(moments, pi, model, ScalingParams(0.01, 0.01), FkParams())
    assert matched.drift_term == pytest.approx(0.0, abs=1e-12)
    assert matched.diffusion_term == pytest.approx(0.0, abs=1e-12)
    assert matched.third_term == pytest.approx(0.0, abs=1e-12)

    # M2/(2s) = 0.25 against a = 1/2, measured in the a^{-1} = 2 metric
    mismatched = stein_bound_service.discrepancy_terms(moments, pi, model, ScalingParams(0.02, 0.02), FkParams())
    assert mismatched.diffusion_term == pytest.approx(0.5, rel=1e-12)


def test_sup_mode_dominates_weighted_mode(one_mode_1d):
    points = torus_service.sample(one_mode_1d, 300, seed=1)
    cloud = PointCloud(points)
    kernel = kernel_service.build_kernel(cloud, 30)
    moments = kernel_service.kernel_moments(kernel, cloud, m_max=4)
    scaling = stein_bound_service.knn_scaling(30, 300, 1)
    pi = uniform_pi(300)
    nu = stein_bound_service.discrepancy_terms(moments, pi, one_mode_1d, scaling, FkParams(), "nu")
    sup = stein_bound_service.discrepancy_terms(moments, pi, one_mode_1d, scaling, FkParams(), "sup")
    assert sup.drift_term >= nu.drift_term
    assert sup.diffusion_term >= nu.diffusion_term
    assert sup.third_term >= nu.third_term
    assert sup.sup_variants[1] == pytest.approx(sup.drift_term)


def test_radius_at_half_is_rejected():
    model = DensityModel.uniform(1)
    moments = matched_moments(model, np.array([[0.1], [0.6]]), 0.01, radius=0.5)
    with pytest.raises(RadiusTooLargeError):
        stein_bound_service.discrepancy_terms(moments, uniform_pi(2), model, ScalingParams(0.01, 0.01), FkParams())
    with pytest.raises(InvalidParameterError):
        stein_bound_service.discrepancy_terms(
            matched_moments(model, np.array([[0.1], [0.6]]), 0.01), uniform_pi(2), model,
            ScalingParams(0.01, 0.01), FkParams(), mode="max",
        )


def test_assemble_with_only_short_time_term():
    model = DensityModel.uniform(2)
    s = 0.004
    terms = stein_bound_service.discrepancy_terms(
        matched_moments(model, np.random.default_rng(2).random((10, 2)), s),
        uniform_pi(10),
        model,
        ScalingParams(s, s),
        FkParams(0.0, 2),
    )
    bound = stein_bound_service.assemble_bound(terms, c_report=3.0)
    assert bound.value == pytest.approx(3.0 * math.sqrt(s))
    assert bound.truncation_bound == 0.0


def test_assemble_is_monotone_in_constant(one_mode_2d):
    cloud = PointCloud(torus_service.sample(one_mode_2d, 400, seed=9))
    kernel = kernel_service.build_kernel(cloud, 40)
    moments = kernel_service.kernel_moments(kernel, cloud)
    scaling = stein_bound_service.knn_scaling(40, 400, 2)
    terms = stein_bound_service.discrepancy_terms(moments, uniform_pi(400), one_mode_2d, scaling, FkParams(0.0, 2))
    once = stein_bound_service.assemble_bound(terms, scaling, c_report=0.5)
    twice = stein_bound_service.assemble_bound(terms, scaling, c_report=1.0)
    assert math.isfinite(once.value)
    assert twice.value >= 2.0 * once.value
    with pytest.raises(InvalidParameterError):
        stein_bound_service.assemble_bound(terms, c_report=0.0)


def test_stein_factor_decreases_in_time(one_mode_1d):
    cloud = PointCloud(torus_service.sample(one_mode_1d, 256, seed=4))
    kernel = kernel_service.build_kernel(cloud, 24)
    moments = kernel_service.kernel_moments(kernel, cloud)
    scaling = stein_bound_service.knn_scaling(24, 256, 1)
    pi = uniform_pi(256)
    values = [
        stein_bound_service.stein_factor(moments, pi, one_mode_1d, scaling, FkParams(), t)
        for t in (scaling.tau, 0.1, 1.0)
    ]
    assert values[0] >= values[1] >= values[2] > 0.0
    total = stein_bound_service.integrated_stein_bound(moments, pi, one_mode_1d, scaling, FkParams())
    assert math.isfinite(total) and total > 0.0


# =============================================================================
# EXPONENTIAL MOMENTS OF THE JUMPS
# =============================================================================


def test_zero_jumps_give_zero_moments():
    cloud = PointCloud(np.array([[0.2], [0.7]]))
    kernel = SparseKernel.from_rows([{0: 1}, {1: 1}], denominator=1)
    scaling = ScalingParams(0.01, 0.01, v0=2.0, v2=2.0 / 3.0)
    report = stein_bound_service.assumption3_check(
        kernel, cloud, DensityModel.uniform(1), FkParams(), scaling, uniform_pi(2)
    )
    assert report.series_value == 0.0
    assert report.gaussian_tail_value == 0.0
    assert report.finite


def test_single_jump_gaussian_tail():
    r, tau = 0.05, 0.01
    cloud = PointCloud(np.array([[0.0], [r]]))
    kernel = SparseKernel.from_rows([{1: 1}, {0: 1}], denominator=1)
    scaling = ScalingParams(tau, tau, v0=2.0, v2=2.0 / 3.0)
    report = stein_bound_service.assumption3_check(
        kernel, cloud, DensityModel.uniform(1), FkParams(), scaling, uniform_pi(2)
    )
    expected = math.sqrt(2 / math.pi) * tau * math.expm1(math.e * r**2 / tau)
    assert report.gaussian_tail_value == pytest.approx(expected, rel=1e-12)
    assert report.series_value > 0.0
    assert report.truncation_bound < 1e-12 * report.series_value


def test_uniform_empirical_exponent_is_invariant_along_a_sweep():
    model = DensityModel.uniform(2)
    matched, mismatched = [], []
    for n in (400, 800, 1600):
        k = math.ceil(n**0.75)
        cloud = PointCloud(torus_service.sample(model, n, seed=0, stream=(n,)))
        kernel = kernel_service.build_kernel(cloud, k)
        report = stein_bound_service.assumption3_check(
            kernel, cloud, model, FkParams(0.0, 2), stein_bound_service.knn_scaling(k, n, 2), uniform_pi(n)
        )
        assert report.finite
        matched.append(report.empirical_exponent)
        # tau built from a k that does not match the kernel
        wrong = stein_bound_service.knn_scaling(math.ceil(n**0.5), n, 2)
        mismatched.append(stein_bound_service.empirical_exponent(kernel, wrong, 2))
    assert max(matched) / min(matched) - 1.0 < 0.05
    assert max(mismatched) / min(mismatched) - 1.0 > 0.3


def test_empirical_exponent_needs_radii():
    kernel = SparseKernel.from_rows([{1: 1}, {0: 1}], denominator=1)
    with pytest.raises(InvalidParameterError):
        stein_bound_service.empirical_exponent(kernel, ScalingParams(0.01, 0.01, v0=2.0, v2=2.0 / 3.0), 1)
