from fractions import Fraction

import numpy as np
import pytest

from app.exceptions import InvalidParameterError, RadiusTooLargeError
from app.models.kernel import PointCloud, SparseKernel
from app.services.kernel_service import kernel_service


def test_knn_radius(small_cloud):
    assert kernel_service.knn_radius(small_cloud, [0.0], 2) == pytest.approx(0.1)
    assert kernel_service.knn_radius(small_cloud, [0.0], 3) == pytest.approx(0.25)
    assert kernel_service.knn_radius(small_cloud, [0.6], 1) == 0.0
    with pytest.raises(InvalidParameterError):
        kernel_service.knn_radius(small_cloud, [0.0], 5)


def test_build_kernel_rows(small_cloud):
    kernel = kernel_service.build_kernel(small_cloud, 2)
    assert [j for j, _ in kernel.row(0)] == [0, 1]
    assert sorted(j for j, _ in kernel.row(3)) == [2, 3]
    assert all(p == Fraction(1, 2) for _, p in kernel.row(3))
    np.testing.assert_allclose(kernel.radii, [0.1, 0.1, 0.15, 0.35])


def test_build_kernel_tie_breaks_by_index():
    cloud = PointCloud(np.array([[0.0], [0.25], [0.75]]))
    kernel = kernel_service.build_kernel(cloud, 2)
    assert sorted(j for j, _ in kernel.row(0)) == [0, 1]


def test_complete_kernel_rows_are_uniform(small_cloud):
    kernel = kernel_service.build_kernel(small_cloud, small_cloud.n, strict=False)
    for i in range(small_cloud.n):
        assert sorted(j for j, _ in kernel.row(i)) == list(range(small_cloud.n))
        assert kernel.row_sum(i) == 1


def test_build_kernel_without_self_loops(small_cloud):
    kernel = kernel_service.build_kernel(small_cloud, 2, include_self=False)
    assert not kernel.has_self_loop().any()
    with pytest.raises(InvalidParameterError):
        kernel_service.build_kernel(small_cloud, 4, include_self=False)


def test_radius_at_half_fails_the_build():
    cloud = PointCloud(np.array([[0.0], [0.05], [0.5]]))
    with pytest.raises(RadiusTooLargeError) as caught:
        kernel_service.build_kernel(cloud, 3)
    assert caught.value.max_radius == 0.5
    assert caught.value.point_index == 0

    kernel = kernel_service.build_kernel(cloud, 3, strict=False)
    np.testing.assert_allclose(kernel.radii, [0.5, 0.45, 0.5])
    assert kernel_service.build_kernel(cloud, 2).radii.max() < 0.5


def test_build_kernel_rejects_k_below_two(small_cloud):
    with pytest.raises(InvalidParameterError):
        kernel_service.build_kernel(small_cloud, 1)


def test_rows_are_exactly_stochastic(random_cloud):
    kernel = kernel_service.build_kernel(random_cloud, 17)
    assert all(kernel.row_sum(i) == 1 for i in range(0, random_cloud.n, 13))
    np.testing.assert_allclose(np.asarray(kernel.to_csr().sum(axis=1)).ravel(), 1.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("include_self", [True, False])
def test_tree_search_matches_brute_force(random_cloud, include_self):
    fast, fast_dist = kernel_service.neighbor_search(random_cloud, 12, include_self)
    slow, slow_dist = kernel_service.brute_force_neighbors(random_cloud, 12, include_self)
    np.testing.assert_array_equal(fast, slow)
    np.testing.assert_allclose(fast_dist, slow_dist)


def test_small_clouds_match_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(100):
        n = int(rng.integers(3, 65))
        cloud = PointCloud(rng.random((n, 2)))
        k = int(rng.integers(1, n + 1))
        fast, _ = kernel_service.neighbor_search(cloud, k)
        slow, _ = kernel_service.brute_force_neighbors(cloud, k)
        np.testing.assert_array_equal(fast, slow)


def test_lattice_neighbours_are_adjacent():
    axis = np.arange(10) / 10.0
    grid = np.array([[x, y] for x in axis for y in axis])
    neighbors, distances = kernel_service.neighbor_search(PointCloud(grid), 5)
    np.testing.assert_allclose(distances[:, 1:], 0.1)
    assert sorted(neighbors[0].tolist()) == [0, 1, 9, 10, 90]


def test_duplicates_come_first():
    rng = np.random.default_rng(4)
    points = rng.random((100, 2))
    points[50] = points[10]
    neighbors, distances = kernel_service.neighbor_search(PointCloud(points), 3)
    assert neighbors[10, :2].tolist() == [10, 50]
    assert neighbors[50, :2].tolist() == [10, 50]
    assert distances[10, 1] == 0.0


def test_two_atom_kernel_moments():
    cloud = PointCloud(np.array([[0.5], [0.6], [0.4]]))
    kernel = SparseKernel.from_rows([{1: 1, 2: 1}, {0: 2}, {0: 2}], denominator=2)
    moments = kernel_service.kernel_moments(kernel, cloud, m_max=4)
    assert moments.moments[1][0, 0] == pytest.approx(0.0, abs=1e-15)
    assert moments.moments[2][0, 0] == pytest.approx(0.01)
    assert moments.moments[3][0, 0] == pytest.approx(0.0, abs=1e-15)
    assert moments.moments[4][0, 0] == pytest.approx(1e-4)
    assert moments.radii[0] == pytest.approx(0.1)


def test_symmetric_cloud_has_no_drift():
    cloud = PointCloud(np.array([[0.0], [0.2], [0.8]]))
    kernel = kernel_service.build_kernel(cloud, 3)
    moments = kernel_service.kernel_moments(kernel, cloud, m_max=2)
    assert moments.moments[1][0, 0] == pytest.approx(0.0, abs=1e-15)
    assert moments.moments[2][0, 0] == pytest.approx(0.08 / 3)


def test_moments_match_direct_sums(random_cloud):
    kernel = kernel_service.build_kernel(random_cloud, 9)
    moments = kernel_service.kernel_moments(kernel, random_cloud, m_max=3)
    neighbors = kernel.neighbor_array()
    for i in (0, 57, 299):
        jumps = np.array([
            random_cloud.points[j] - random_cloud.points[i] - np.round(random_cloud.points[j] - random_cloud.points[i])
            for j in neighbors[i]
        ])
        np.testing.assert_allclose(moments.tensor(i, 1).entries, jumps.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(
            moments.tensor(i, 2).entries, np.einsum("ja,jb->ab", jumps, jumps) / 9, atol=1e-15
        )
