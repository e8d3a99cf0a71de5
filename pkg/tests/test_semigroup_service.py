import math

import numpy as np
import pytest

from app.exceptions import InvalidParameterError, NonPositiveValueError, UnsupportedGeneratorError
from app.models.tensor import MetricMatrix
from app.models.torus import Mode, TrigSeries
from app.services.semigroup_service import semigroup_service

N = 256
TWO_PI = 2.0 * np.pi


def sin_phi(x):
    return np.sin(TWO_PI * x)


def one_mode_h(x):
    return 1.0 + 0.5 * np.cos(TWO_PI * x)


@pytest.fixture(scope="module")
def heat():
    return semigroup_service.heat_generator(N)


# =============================================================================
# GENERATORS AND EVOLUTION
# =============================================================================


def test_generator_annihilates_constants(heat, one_mode_1d):
    np.testing.assert_array_equal(heat.apply(np.ones(N)), 0.0)
    reversible = semigroup_service.reversible_generator(one_mode_1d, N)
    np.testing.assert_allclose(reversible.apply(np.full(N, 3.0)), 0.0, atol=1e-9)


def test_flux_form_keeps_mu_invariant(one_mode_1d):
    gen = semigroup_service.reversible_generator(one_mode_1d, N)
    assert gen.flux_form
    scale = float(np.max(gen.up))
    np.testing.assert_allclose(gen.matrix.T @ gen.mu, 0.0, atol=1e-12 * scale)
    expected = one_mode_1d.value(gen.grid[:, None]) ** 4
    np.testing.assert_allclose(gen.mu, expected / expected.sum(), rtol=1e-12)


def test_central_stencil_derives_invariant_vector():
    gen = semigroup_service.build_generator(1.0, lambda x: 0.5 * np.sin(TWO_PI * x), N)
    assert not gen.flux_form
    assert gen.mu.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(gen.matrix.T @ gen.mu, 0.0, atol=1e-8)


def test_generator_preconditions(one_mode_2d):
    with pytest.raises(NonPositiveValueError):
        semigroup_service.build_generator(lambda x: np.cos(TWO_PI * x), 0.0, N)
    with pytest.raises(InvalidParameterError):
        semigroup_service.build_generator(1.0, 0.0, 4)
    with pytest.raises(InvalidParameterError):
        semigroup_service.reversible_generator(one_mode_2d, N)
    with pytest.raises(InvalidParameterError):
        semigroup_service.build_named("wave", N)


def test_heat_decay_of_first_mode(heat):
    state = semigroup_service.evolve(heat, lambda x: np.cos(TWO_PI * x), 0.01)
    assert state.time == 0.01
    assert state.values[0] == pytest.approx(math.exp(-4 * math.pi**2 * 0.01), rel=1e-4)
    assert math.exp(-4 * math.pi**2 * 0.01) == pytest.approx(0.67383, abs=1e-5)


def test_evolve_many_matches_single_evolutions(heat):
    times = [0.0, 0.003, 0.01]
    many = semigroup_service.evolve_many(heat, sin_phi, times)
    np.testing.assert_array_equal(many[0.0], sin_phi(heat.grid))
    single = semigroup_service.evolve(heat, sin_phi, 0.01).values
    np.testing.assert_allclose(many[0.01], single, atol=1e-10)


def test_evolve_rejects_bad_times(heat):
    with pytest.raises(InvalidParameterError):
        semigroup_service.evolve(heat, sin_phi, -0.1)
    with pytest.raises(InvalidParameterError):
        semigroup_service.evolve(heat, sin_phi, 0.1, dt=0.0)


def test_spectral_derivative_is_exact_on_modes(heat):
    x = heat.grid
    np.testing.assert_allclose(semigroup_service.derivative(np.sin(TWO_PI * x), 1), TWO_PI * np.cos(TWO_PI * x), atol=1e-10)
    np.testing.assert_allclose(
        semigroup_service.derivative(np.cos(2 * TWO_PI * x), 2), -(2 * TWO_PI) ** 2 * np.cos(2 * TWO_PI * x), atol=1e-8
    )


# =============================================================================
# GRADIENT BOUNDS
# =============================================================================


def test_heat_gradient_bounds_hold(heat):
    report = semigroup_service.gradient_bound_check(heat, sin_phi, 0.0, [0.005, 0.02, 0.1])
    assert report.passed
    assert len(report.entries) == 9
    # k = 1 is tight for a single mode at small t
    assert report.ratio(1, 0.005) == pytest.approx(1.0, abs=0.05)


def test_halved_factors_are_detected(heat):
    def halved(k, t, params):
        return 0.5 * semigroup_service.bounds.eval_fk(k, t, params)

    report = semigroup_service.gradient_bound_check(heat, sin_phi, 0.0, [0.005, 0.02], fk=halved)
    assert not report.passed


def test_bakry_emery_gradient_bounds_hold():
    potential = TrigSeries(dim=1, modes=(Mode(amp=0.1, freq=(1,)),))
    gen = semigroup_service.bakry_emery_generator(potential, N)
    rho = semigroup_service.estimate_rho_hessian(potential, N)
    phi = lambda x: np.sin(TWO_PI * x) + 0.5 * np.cos(2 * TWO_PI * x)
    report = semigroup_service.gradient_bound_check(gen, phi, rho, [0.005, 0.02, 0.1])
    assert report.passed


def test_gradient_order_is_capped(heat):
    with pytest.raises(InvalidParameterError):
        semigroup_service.gradient_bound_check(heat, sin_phi, 0.0, [0.1], k_max=4)


# =============================================================================
# SPECTRAL GAP, FISHER INFORMATION, INTERPOLATION
# =============================================================================


def test_heat_spectral_gap(heat):
    assert semigroup_service.spectral_gap(heat) == pytest.approx(4 * math.pi**2, rel=1e-4)


def test_reversible_spectral_gap_is_positive(one_mode_1d):
    gen = semigroup_service.reversible_generator(one_mode_1d, N)
    assert semigroup_service.spectral_gap(gen) > 0.0


def test_fisher_information_matches_fine_quadrature(heat):
    x = (np.arange(10_000) + 0.5) / 10_000
    h = one_mode_h(x)
    slope = -np.pi * np.sin(TWO_PI * x)
    oracle = float(np.mean(slope**2 / h))
    assert semigroup_service.fisher_information(heat, one_mode_h) == pytest.approx(oracle, rel=1e-8)
    assert semigroup_service.fisher_information(heat, 1.0) == 0.0
    with pytest.raises(NonPositiveValueError):
        semigroup_service.fisher_information(heat, lambda x: np.cos(TWO_PI * x))


def test_fisher_trace_decreases(heat):
    trace = semigroup_service.fisher_trace(heat, one_mode_h, 0.2)
    assert trace.values[0] > trace.values[-1]
    assert np.all(np.diff(trace.values) <= 1e-9 * trace.values[0])
    assert trace.w2 > 0.0
    assert len(trace.rows()) == trace.times.size


def test_w2_density_of_equal_densities_is_zero(heat):
    h = one_mode_h(heat.grid)
    assert semigroup_service.w2_density(heat, h, h) == pytest.approx(0.0, abs=1e-12)


def test_interpolation_inequality_for_heat(heat):
    report = semigroup_service.interp_inequality_check(heat, one_mode_h, 0.2)
    assert report.holds
    assert report.kappa == pytest.approx(4 * math.pi**2, rel=0.02)
    assert report.c == 1.0
    assert report.empirical_rate == pytest.approx(4 * math.pi**2, rel=0.25)
    with pytest.raises(InvalidParameterError):
        semigroup_service.interp_inequality_check(heat, one_mode_h, 0.0)


# =============================================================================
# GAMMA CALCULUS AND CURVATURE
# =============================================================================


def test_gamma_ops_for_heat(heat):
    x = heat.grid
    g1, g2 = semigroup_service.gamma_ops(heat, sin_phi, sin_phi)
    np.testing.assert_allclose(g1, (TWO_PI * np.cos(TWO_PI * x)) ** 2, atol=1e-8)
    np.testing.assert_allclose(g2, TWO_PI**4 * np.sin(TWO_PI * x) ** 2, rtol=0, atol=1e-3 * TWO_PI**4)


def test_gamma2_with_drift_follows_bochner_and_converges():
    # L = u'' - u' d/dx on u = 0.1 cos(2 pi x): Gamma_2(phi) = phi''^2 + u'' phi'^2
    potential = TrigSeries(dim=1, modes=(Mode(amp=0.1, freq=(1,)),))

    def phi(x):
        return np.sin(TWO_PI * x) + 0.3 * np.cos(2 * TWO_PI * x)

    def exact(x):
        d1 = TWO_PI * np.cos(TWO_PI * x) - 0.6 * TWO_PI * np.sin(2 * TWO_PI * x)
        d2 = -(TWO_PI**2) * np.sin(TWO_PI * x) - 1.2 * TWO_PI**2 * np.cos(2 * TWO_PI * x)
        u2 = -0.1 * TWO_PI**2 * np.cos(TWO_PI * x)
        return d1**2, d2**2 + u2 * d1**2

    errors = {}
    for size in (256, 512):
        gen = semigroup_service.bakry_emery_generator(potential, size)
        g1, g2 = semigroup_service.gamma_ops(gen, phi, phi)
        want1, want2 = exact(gen.grid)
        np.testing.assert_allclose(g1, want1, atol=1e-8)
        errors[size] = float(np.max(np.abs(g2 - want2)))

        rho = semigroup_service.estimate_rho_hessian(potential, size)
        assert rho == pytest.approx(-0.1 * TWO_PI**2, rel=1e-3)
        assert np.min(g2 - rho * g1) >= -2.0 * errors[size]

    scale = float(np.max(np.abs(exact(np.arange(512) / 512)[1])))
    assert errors[512] <= 1e-3 * scale
    assert errors[512] <= 0.35 * errors[256]


def test_curvature_of_cosine_potential():
    potential = TrigSeries(dim=1, modes=(Mode(amp=1.0, freq=(1,)),))
    assert semigroup_service.estimate_rho_hessian(potential, 64) == pytest.approx(-4 * math.pi**2)
    assert semigroup_service.estimate_rho_hessian(TrigSeries(dim=2), 16) == 0.0
    with pytest.raises(UnsupportedGeneratorError):
        semigroup_service.estimate_rho_hessian(potential, 64, MetricMatrix(np.array([[2.0]])))
    assert semigroup_service.estimate_rho_hessian(potential, 64, 1.0) == pytest.approx(-4 * math.pi**2)


# =============================================================================
# TAYLOR, SHORT TIME, LAB RUN
# =============================================================================


def test_taylor_errors_shrink_with_order(heat):
    report = semigroup_service.taylor_check(heat, sin_phi, 0.01)
    assert report.delta == pytest.approx(4 / N)
    assert report.errors[1] > report.errors[2] > report.errors[3]
    assert report.errors[6] < 1e-9


def test_short_time_bound_for_heat(heat):
    report = semigroup_service.short_time_bound(heat, one_mode_h, [0.001, 0.01, 0.1])
    assert report.passed
    assert len(report.entries) == 3


def test_run_lab_for_heat():
    run = semigroup_service.run_lab("heat", sin_phi, [0.005, 0.02], size=N, T=0.2)
    assert run.rho == 0.0
    assert run.grid_size == N
    assert run.gradient.passed
    assert run.spectral_gap == pytest.approx(4 * math.pi**2, rel=1e-4)
    assert run.interpolation is not None and run.interpolation.holds
    assert run.taylor.t == 0.005
    assert run.short_time.passed


def test_run_lab_bakry_emery_uses_hessian_curvature():
    potential = TrigSeries(dim=1, modes=(Mode(amp=0.1, freq=(1,)),))
    run = semigroup_service.run_lab("bakry_emery", sin_phi, [0.02], size=128, potential=potential)
    assert run.rho == pytest.approx(-0.4 * math.pi**2)
    assert run.interpolation is None
