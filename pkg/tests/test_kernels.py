import numpy as np
import pytest
from hypothesis import given, strategies as st

from src.operations.dataset import Dataset, load_csv, save_csv
from src.operations.errors import InvalidInputError, NotPositiveDefiniteError
from src.operations.kernels import (CompositeKernel, KernelSpec, build_covariance, cross_covariance, default_kernel,
                                    kernel_from_dict)
from src.operations.registry import load_dataset, ripley
from tests.conftest import se_kernel


def test_squared_exponential_at_one_length_scale():
    x = np.array([[0.0], [0.7]])
    K = cross_covariance(x, x, se_kernel(1.0, 0.7))
    assert K[0, 1] == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert K[0, 0] == pytest.approx(1.0)


def test_constant_kernel_gets_minimal_jitter():
    x = np.linspace(0, 1, 5)[:, None]
    K = build_covariance(x, CompositeKernel((KernelSpec('constant', 0.0),)))
    off = K[~np.eye(5, dtype=bool)]
    assert np.all(off == 1.0)
    assert np.all(np.diag(K) > 1.0)
    assert np.all(np.diag(K) <= 1.0 + 1e-4 + 1e-12)


def test_linear_kernel_on_zero_covariates_is_rejected():
    x = np.zeros((4, 1))
    with pytest.raises(NotPositiveDefiniteError):
        build_covariance(x, CompositeKernel((KernelSpec('linear', 0.0),)))


@given(st.floats(-2.0, 2.0), st.floats(-1.5, 1.5))
def test_covariance_is_symmetric_and_factorizable(log_magnitude, log_length):
    x = np.linspace(-2, 2, 12)[:, None]
    kernel = CompositeKernel((KernelSpec('squared-exponential', log_magnitude, (log_length,)),))
    K = build_covariance(x, kernel)
    np.testing.assert_array_equal(K, K.T)
    np.linalg.cholesky(K)


def test_composite_parameters_round_through_names():
    kernel = default_kernel(2)
    assert kernel.n_params == 1 + 1 + 3
    assert kernel.param_names()[-2:] == ['k2.squared-exponential.log_length_scale_1',
                                         'k2.squared-exponential.log_length_scale_2']
    moved = kernel.with_params(np.arange(5.0))
    np.testing.assert_array_equal(moved.params(), np.arange(5.0))


def test_length_scale_multiplier_leaves_other_terms():
    kernel = default_kernel(1).scale_length_scales(2.0)
    assert kernel.components[2].log_length_scales[0] == pytest.approx(np.log(2.0))
    assert kernel.components[1].log_magnitude == pytest.approx(np.log(0.1))


def test_kernel_from_dict_expands_ard():
    kernel = kernel_from_dict([{"kind": "squared-exponential", "magnitude": 2.0, "length_scales": [0.5],
                                "ard": True}], d=3)
    assert kernel.components[0].log_length_scales == pytest.approx((np.log(0.5),) * 3)
    with pytest.raises(InvalidInputError):
        kernel_from_dict([{"kind": "squared-exponential", "length_scales": [-1.0]}], d=1)
    with pytest.raises(InvalidInputError):
        kernel_from_dict([{"kind": "periodic"}], d=1)


def test_csv_round_trip_keeps_censoring(tmp_path):
    data = Dataset(np.array([[0.5, 1.0], [1.5, -1.0]]), np.array([2.0, 3.0]), np.array([False, True]))
    path = tmp_path / 'data.csv'
    save_csv(data, str(path))
    loaded = load_csv(str(path))
    np.testing.assert_allclose(loaded.x, data.x)
    np.testing.assert_array_equal(loaded.censored, data.censored)


def test_csv_errors_name_the_line(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text("x1,y\n0.1,1.0\n0.2,abc\n")
    with pytest.raises(InvalidInputError, match=':3:'):
        load_csv(str(path))


def test_registry_is_seeded():
    a, b = ripley(seed=4), ripley(seed=4)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.n == 250
    assert set(np.unique(a.y)) == {-1.0, 1.0}
    with pytest.raises(InvalidInputError):
        load_dataset('no-such-source')
