import numpy as np
import pytest

from src.operations.errors import InvalidInputError, NumericalFailureError
from src.operations.quadrature import adapt_grid, gaussian_fit, integrate, integrate_log


def test_grid_is_symmetric_with_a_center_node():
    grid = adapt_grid(0.0, 1.0, 21)
    assert np.min(np.abs(grid.nodes)) < 1e-12
    np.testing.assert_allclose(np.sort(grid.nodes), -np.sort(grid.nodes)[::-1], atol=1e-12)


def test_standard_normal_moments():
    grid = adapt_grid(0.0, 1.0, 21)
    assert integrate(np.ones_like, grid).value == pytest.approx(1.0, abs=1e-10)
    assert integrate(np.square, grid).value == pytest.approx(1.0, abs=1e-8)


def test_batched_references():
    grid = adapt_grid([0.0, 1.0], [1.0, 4.0])
    result = integrate(np.square, grid)
    np.testing.assert_allclose(result.value, [1.0, 5.0], atol=1e-8)


def test_too_few_nodes_are_rejected():
    with pytest.raises(InvalidInputError):
        adapt_grid(0.0, 1.0, 9)
    with pytest.raises(InvalidInputError):
        adapt_grid(0.0, 1.0, 12)


def test_concentrated_integrand_is_flagged():
    result = integrate(lambda f: np.exp(f ** 2 + f), adapt_grid(0.0, 1.0))
    assert result.unstable


def test_plain_integral_of_a_scaled_gaussian():
    # sqrt(2) exp(-f^2/2) integrates to 2 sqrt(pi)
    result = integrate_log(lambda f: 0.5 * np.log(2.0) - 0.5 * f ** 2, adapt_grid(0.0, 1.0), against_reference=False)
    assert result.value == pytest.approx(np.log(2 * np.sqrt(np.pi)), abs=1e-10)
    assert not result.unstable


def test_zero_integrand():
    grid = adapt_grid(0.0, 1.0)
    with pytest.raises(NumericalFailureError):
        integrate_log(lambda f: np.full_like(f, -np.inf), grid)
    result = integrate_log(lambda f: np.full_like(f, -np.inf), grid, strict=False)
    assert np.isnan(result.value) and result.unstable


def test_gaussian_fit_finds_the_mode():
    def derivatives(f):
        return -(f - 2.0) ** 2 / 0.6, -(f - 2.0) / 0.3, np.full_like(f, -1 / 0.3)

    mode, var, ok = gaussian_fit(derivatives, np.array([0.0]), np.array([1.0]))
    assert mode[0] == pytest.approx(2.0, abs=1e-10)
    assert var[0] == pytest.approx(0.3)
    assert ok[0]
