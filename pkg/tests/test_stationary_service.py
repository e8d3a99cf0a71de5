import numpy as np
import pytest

from app.exceptions import InvalidParameterError, MaxIterExceededError, MultipleClosedClassesError
from app.models.kernel import PointCloud, SparseKernel
from app.services.kernel_service import kernel_service
from app.services.stationary_service import stationary_service
from app.services.torus_service import torus_service


def absorbing_pair():
    return SparseKernel.from_rows([{0: 2}, {0: 1, 1: 1}], denominator=2)


def test_three_cycle_is_one_closed_class():
    kernel = SparseKernel.from_rows([{1: 1}, {2: 1}, {0: 1}], denominator=1)
    report = stationary_service.communicating_classes(kernel)
    assert report.classes == [[0, 1, 2]]
    assert report.closed == [True]
    assert report.is_unique


def test_absorbing_state_classes():
    report = stationary_service.communicating_classes(absorbing_pair())
    assert report.classes == [[0], [1]]
    assert report.closed == [True, False]


def test_disjoint_cycles_are_rejected():
    kernel = SparseKernel.from_rows([{1: 1}, {0: 1}, {3: 1}, {2: 1}], denominator=1)
    report = stationary_service.communicating_classes(kernel)
    assert len(report.closed_classes) == 2
    with pytest.raises(MultipleClosedClassesError) as info:
        stationary_service.stationary_distribution(kernel)
    assert info.value.closed_classes == [[0, 1], [2, 3]]


def test_absorbing_state_gets_all_mass():
    pi = stationary_service.stationary_distribution(absorbing_pair())
    np.testing.assert_allclose(pi.probabilities, [1.0, 0.0], atol=1e-12)
    assert pi.method == "power"


def test_doubly_stochastic_kernel_has_uniform_measure():
    kernel = SparseKernel.from_rows([{0: 1, 1: 1}, {1: 1, 2: 1}, {2: 1, 0: 1}], denominator=2)
    pi = stationary_service.stationary_distribution(kernel)
    np.testing.assert_allclose(pi.probabilities, np.full(3, 1 / 3), rtol=1e-14)
    assert pi.iterations == 0


def test_kernel_without_self_loops_switches_to_lazy_iteration():
    kernel = SparseKernel.from_rows([{1: 2}, {0: 1, 2: 1}, {1: 2}], denominator=2)
    pi = stationary_service.stationary_distribution(kernel)
    assert pi.lazy
    np.testing.assert_allclose(pi.probabilities, [0.25, 0.5, 0.25], atol=1e-11)


def test_knn_kernel_matches_direct_solve():
    rng = np.random.default_rng(12)
    cloud = PointCloud(rng.random((120, 2)))
    kernel = kernel_service.build_kernel(cloud, 8)
    try:
        pi = stationary_service.stationary_distribution(kernel)
    except MultipleClosedClassesError:
        pytest.skip("random cloud split into several closed classes")
    direct = stationary_service.direct_solve(kernel)
    assert pi.residual <= 1e-12
    np.testing.assert_allclose(pi.probabilities, direct.probabilities, atol=1e-8)
    assert abs(pi.probabilities.sum() - 1.0) < 1e-12


def test_invariance_residual():
    kernel = absorbing_pair()
    assert stationary_service.invariance_residual([1.0, 0.0], kernel) <= 1e-14
    assert stationary_service.invariance_residual([0.5, 0.5], kernel) == pytest.approx(0.5)
    eps = 1e-6
    assert stationary_service.invariance_residual([1.0 - eps, eps], kernel) == pytest.approx(eps)


def test_iteration_cap_is_reported():
    kernel = SparseKernel.from_rows([{0: 1, 1: 999}, {0: 999, 1: 1}], denominator=1000)
    with pytest.raises(MaxIterExceededError):
        stationary_service.stationary_distribution(
            SparseKernel.from_rows([{0: 1, 1: 1}, {0: 1, 1: 1}, {0: 1, 2: 1}], denominator=2), max_iter=0
        )
    # uniform is already invariant here, so zero iterations suffice
    assert stationary_service.stationary_distribution(kernel, max_iter=0).iterations == 0


def test_nonpositive_tolerance_is_rejected():
    with pytest.raises(InvalidParameterError):
        stationary_service.stationary_distribution(absorbing_pair(), tol=0.0)


def test_density_estimate_tracks_density(one_mode_1d):
    points = torus_service.sample(one_mode_1d, 2000, seed=3)
    cloud = PointCloud(points)
    kernel = kernel_service.build_kernel(cloud, 120)
    pi = stationary_service.stationary_distribution(kernel)
    estimate = stationary_service.estimate_density(pi, cloud)
    truth = one_mode_1d.value(points)
    assert np.mean(1.0 / estimate) == pytest.approx(1.0)
    assert np.corrcoef(estimate, truth)[0, 1] > 0.9
