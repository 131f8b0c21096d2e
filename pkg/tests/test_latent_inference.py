import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import multivariate_normal, norm

from src.operations.dataset import Dataset
from src.operations.errors import CavityFailureError, InvalidInputError
from src.operations.ep import ep_fit
from src.operations.kernels import build_covariance
from src.operations.laplace import la_loo_cavities, la_loo_cavity_lr, laplace_fit
from src.operations.likelihoods import LikelihoodSpec, gaussian_spec
from src.operations.loo import gaussian_exact_loo
from src.operations.model import GPModel
from src.operations.posterior import cavities_from, cavity_remove
from src.operations.registry import classification
from tests.conftest import se_kernel

ONE_POSITIVE = Dataset(np.array([[0.0]]), np.array([1.0]))


def test_laplace_on_gaussian_matches_the_closed_form(regression_data):
    K = build_covariance(regression_data.x, se_kernel())
    state = laplace_fit(regression_data, K, gaussian_spec(0.5))
    C = K + 0.5 * np.eye(regression_data.n)
    np.testing.assert_allclose(state.mode, K @ np.linalg.solve(C, regression_data.y), atol=1e-8)
    np.testing.assert_allclose(state.posterior.cov, K - K @ np.linalg.solve(C, K), atol=1e-8)
    expected = multivariate_normal.logpdf(regression_data.y, np.zeros(regression_data.n), C)
    assert state.posterior.log_marginal == pytest.approx(expected, abs=1e-8)


def test_laplace_mode_for_zero_outcomes():
    data = Dataset(np.linspace(0, 1, 4)[:, None], np.zeros(4))
    state = laplace_fit(data, build_covariance(data.x, se_kernel()), gaussian_spec(1.0))
    np.testing.assert_allclose(state.mode, 0.0, atol=1e-12)


def test_laplace_probit_single_point():
    expected = brentq(lambda f: f - np.exp(norm.logpdf(f) - norm.logcdf(f)), 0.0, 2.0, xtol=1e-14)
    state = laplace_fit(ONE_POSITIVE, np.array([[1.0]]), LikelihoodSpec('probit'))
    assert state.mode[0] == pytest.approx(expected, abs=1e-8)


def test_laplace_flags_negative_sites_for_an_outlier():
    data = Dataset(np.array([[0.0], [0.01]]), np.array([0.0, 10.0]))
    K = build_covariance(data.x, se_kernel())
    state = laplace_fit(data, K, LikelihoodSpec('student-t', (np.log(0.1),)))
    assert state.flags.get(1) == 'negative-site'
    assert state.sites.tau[1] < 0
    assert np.all(state.posterior.var > 0)


def test_laplace_rejects_mismatched_covariance(regression_data):
    with pytest.raises(InvalidInputError):
        laplace_fit(regression_data, np.eye(3), gaussian_spec(0.5))


def test_linear_response_and_site_removal_agree(probit_model):
    fm = probit_model.fit()
    lr = la_loo_cavities(fm.state)
    removed = cavities_from(fm.state.posterior, fm.state.sites)
    np.testing.assert_allclose(lr.mean, removed.mean, atol=1e-8)
    np.testing.assert_allclose(lr.var, removed.var, rtol=1e-8)
    single = la_loo_cavity_lr(fm.state, 3)
    assert single.mean[0] == pytest.approx(lr.mean[3])


def test_laplace_cavities_on_gaussian_are_exact(regression_model):
    fm = regression_model.fit()
    cavity = la_loo_cavities(fm.state)
    exact = gaussian_exact_loo(fm.K, 0.5, regression_model.data.y)
    np.testing.assert_allclose(cavity.mean, exact.mean, atol=1e-8)
    np.testing.assert_allclose(cavity.var, exact.var, rtol=1e-8)


def test_ep_on_gaussian_recovers_the_likelihood(regression_data):
    K = build_covariance(regression_data.x, se_kernel())
    state = ep_fit(regression_data, K, gaussian_spec(0.5))
    assert state.converged
    np.testing.assert_allclose(state.sites.tau, 2.0, rtol=1e-4)
    np.testing.assert_allclose(state.sites.mean, regression_data.y, atol=1e-4)
    expected = multivariate_normal.logpdf(regression_data.y, np.zeros(regression_data.n),
                                          K + 0.5 * np.eye(regression_data.n))
    assert state.posterior.log_marginal == pytest.approx(expected, abs=1e-6)


def test_ep_probit_single_point():
    state = ep_fit(ONE_POSITIVE, np.array([[1.0]]), LikelihoodSpec('probit'))
    assert state.cavities.mean[0] == pytest.approx(0.0, abs=1e-10)
    assert state.cavities.var[0] == pytest.approx(1.0, abs=1e-10)
    assert state.tilted_log_z0[0] == pytest.approx(np.log(0.5), abs=1e-10)


def test_ep_moments_match_at_convergence(probit_model):
    fm = probit_model.with_method('ep').fit()
    assert fm.state.converged
    np.testing.assert_allclose(fm.state.tilted_mean, fm.state.posterior.mean, atol=1e-6)
    np.testing.assert_allclose(fm.state.tilted_var, fm.state.posterior.var, atol=1e-6)


def test_cavity_remove():
    cavity = cavity_remove(1.0, 0.5, 2.0, 1.0)
    assert cavity.mean[0] == pytest.approx(0.0)
    assert cavity.var[0] == pytest.approx(1.0)
    untouched = cavity_remove(1.0, 0.5, 0.0, np.inf)
    assert untouched.mean[0] == pytest.approx(1.0)
    assert untouched.var[0] == pytest.approx(0.5)
    with pytest.raises(CavityFailureError):
        cavity_remove(1.0, 0.5, 0.0, 0.25)


def test_model_rejects_unknown_method(regression_data):
    with pytest.raises(InvalidInputError):
        GPModel(regression_data, se_kernel(), gaussian_spec(0.5), method='variational')


def test_permuting_observations_permutes_the_fit():
    data = classification(n=40, seed=8)
    order = np.random.default_rng(4).permutation(data.n)
    shuffled = data.permuted(order)
    kernel = se_kernel(2.0, 0.8)
    K = build_covariance(data.x, kernel)
    K_shuffled = build_covariance(shuffled.x, kernel)
    np.testing.assert_allclose(K_shuffled, K[np.ix_(order, order)], atol=1e-12)

    probit = LikelihoodSpec('probit')
    la, la_shuffled = laplace_fit(data, K, probit), laplace_fit(shuffled, K_shuffled, probit)
    assert la_shuffled.posterior.log_marginal == pytest.approx(la.posterior.log_marginal, abs=1e-8)
    np.testing.assert_allclose(la_shuffled.mode, la.mode[order], atol=1e-8)

    ep, ep_shuffled = ep_fit(data, K, probit), ep_fit(shuffled, K_shuffled, probit)
    assert ep_shuffled.posterior.log_marginal == pytest.approx(ep.posterior.log_marginal, abs=1e-8)
    np.testing.assert_allclose(ep_shuffled.posterior.mean, ep.posterior.mean[order], atol=1e-6)
    np.testing.assert_allclose(ep_shuffled.tilted_log_z0, ep.tilted_log_z0[order], atol=1e-6)
