import numpy as np
import pytest

from app.exceptions import NotPositiveDefiniteError, ShapeMismatchError, UnsupportedDimensionError
from app.models.tensor import MetricMatrix, SymTensor
from app.services.tensor_service import TensorService, tensor_service


def test_tensor_power_of_basis_vector():
    t = tensor_service.tensor_power([1.0, 0.0], 2)
    np.testing.assert_array_equal(t.entries, [[1.0, 0.0], [0.0, 0.0]])


def test_tensor_power_scalar_case():
    assert float(tensor_service.tensor_power([2.0], 3).entries.reshape(-1)[0]) == 8.0


def test_tensor_power_order_zero_is_one():
    t = tensor_service.tensor_power([0.3, -1.2, 4.0], 0)
    assert t.order == 0
    assert float(t.entries) == 1.0


def test_metric_inner_diagonal_metric():
    x = SymTensor(np.array([1.0, 1.0]), 2)
    A = MetricMatrix(np.diag([2.0, 3.0]))
    assert tensor_service.metric_inner(x, x, A) == pytest.approx(5.0)


def test_metric_inner_identity_is_sum_of_squares():
    rng = np.random.default_rng(0)
    x = SymTensor(rng.normal(size=(3, 3, 3)), 3)
    value = tensor_service.metric_inner(x, x, MetricMatrix.identity(3))
    assert value == pytest.approx(float(np.sum(x.entries**2)))


def test_metric_inner_of_outer_square():
    x = tensor_service.tensor_power([1.0, 0.0], 2)
    assert tensor_service.metric_inner(x, x, MetricMatrix(np.diag([2.0, 3.0]))) == pytest.approx(4.0)


def test_metric_norm_cases():
    A = MetricMatrix(np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert tensor_service.metric_norm(SymTensor.zeros(2, 3), A) == 0.0
    assert tensor_service.metric_norm(SymTensor(np.array([3.0, 4.0]), 2), MetricMatrix.identity(2)) == pytest.approx(5.0)

    v = np.array([0.7, -0.4])
    quad = float(v @ A.entries @ v)
    for m in range(1, 5):
        norm = tensor_service.metric_norm(tensor_service.tensor_power(v, m), A)
        assert norm == pytest.approx(quad ** (m / 2.0), rel=1e-12)


def test_general_and_scaled_paths_agree():
    rng = np.random.default_rng(1)
    x = SymTensor(rng.normal(size=(2, 2, 2)), 2)
    scaled = MetricMatrix.scaled_identity(2, 0.37)
    general = MetricMatrix(0.37 * np.eye(2), "general")
    assert tensor_service.metric_norm(x, scaled) == pytest.approx(tensor_service.metric_norm(x, general), rel=1e-13)


def test_field_norms_match_single_tensor_norms():
    rng = np.random.default_rng(2)
    tensors = rng.normal(size=(5, 8))
    scales = rng.uniform(0.5, 2.0, size=5)
    batched = tensor_service.field_norms(tensors, scales, 3)
    for i in range(5):
        single = tensor_service.metric_norm(
            SymTensor.from_flat(tensors[i], 2, 3), MetricMatrix.scaled_identity(2, scales[i])
        )
        assert batched[i] == pytest.approx(single, rel=1e-12)


def test_order_mismatch_raises():
    with pytest.raises(ShapeMismatchError):
        tensor_service.metric_inner(SymTensor.zeros(2, 1), SymTensor.zeros(2, 2), MetricMatrix.identity(2))


def test_metric_must_be_positive_definite():
    with pytest.raises(NotPositiveDefiniteError):
        MetricMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefiniteError):
        MetricMatrix(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_caps_are_enforced():
    capped = TensorService(max_order=3, max_dim=2)
    with pytest.raises(UnsupportedDimensionError):
        capped.tensor_power([1.0, 2.0], 4)
    with pytest.raises(UnsupportedDimensionError):
        capped.tensor_power([1.0, 2.0, 3.0], 1)
