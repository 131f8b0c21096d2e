import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate as sp_integrate
from scipy.stats import norm, t as student_t

from src.operations.errors import InvalidInputError, UnsupportedOperationError
from src.operations.likelihoods import LikelihoodSpec, gaussian_spec, likelihood_moments, loglik, predictive_cdf

STUDENT_T = LikelihoodSpec('student-t', (np.log(0.5),), nu=4.0)
LOG_LOGISTIC = LikelihoodSpec('log-logistic-censored', (np.log(2.0),))


def _oracle_moments(log_p, mu, v, lower=-20.0, upper=20.0, points=100001):
    f = np.linspace(lower, upper, points)
    h = np.exp(log_p(f) + norm.logpdf(f, mu, np.sqrt(v)))
    z0 = sp_integrate.trapezoid(h, f)
    mean = sp_integrate.trapezoid(f * h, f) / z0
    return np.log(z0), mean, sp_integrate.trapezoid((f - mean) ** 2 * h, f) / z0


def test_gaussian_log_density_and_derivatives():
    value, first, second = loglik(0.0, 0.0, gaussian_spec(1.0))
    assert value == pytest.approx(-0.5 * np.log(2 * np.pi))
    assert first == 0.0
    assert second == -1.0


def test_probit_at_zero():
    assert loglik(1.0, 0.0, LikelihoodSpec('probit'))[0] == pytest.approx(np.log(0.5))
    with pytest.raises(InvalidInputError):
        loglik(0.0, 0.0, LikelihoodSpec('probit'))


def test_student_t_curvature_changes_sign():
    _, first, second = loglik(1.0, 1.0, STUDENT_T)
    assert first == pytest.approx(0.0)
    assert second < 0
    assert loglik(1.0, 11.0, STUDENT_T)[2] > 0


@given(st.sampled_from([gaussian_spec(0.3), LikelihoodSpec('probit'), STUDENT_T, LOG_LOGISTIC]),
       st.floats(-3.0, 3.0), st.booleans())
def test_derivatives_match_finite_differences(spec, f, censored):
    y = {'gaussian': 0.4, 'probit': -1.0, 'student-t': 0.4, 'log-logistic-censored': 1.7}[spec.kind]
    cens = np.array([censored]) if spec.kind == 'log-logistic-censored' else None
    h = 1e-5
    _, first, second = loglik(np.array([y]), np.array([f]), spec, cens)
    plus = loglik(np.array([y]), np.array([f + h]), spec, cens)
    minus = loglik(np.array([y]), np.array([f - h]), spec, cens)
    assert first[0] == pytest.approx((plus[0][0] - minus[0][0]) / (2 * h), rel=1e-5, abs=1e-6)
    assert second[0] == pytest.approx((plus[1][0] - minus[1][0]) / (2 * h), rel=1e-5, abs=1e-6)


def test_closed_form_moments():
    probit = likelihood_moments(1.0, 0.0, 1.0, LikelihoodSpec('probit'))
    assert probit.log_z0[0] == pytest.approx(np.log(0.5), abs=1e-14)
    gaussian = likelihood_moments(0.0, 0.0, 1.0, gaussian_spec(1.0))
    assert gaussian.log_z0[0] == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-14)
    assert gaussian.mean[0] == pytest.approx(0.0)
    assert gaussian.var[0] == pytest.approx(0.5)


def test_student_t_moments_against_dense_trapezoid():
    moments = likelihood_moments(0.0, 3.0, 0.5, STUDENT_T)
    log_z0, mean, var = _oracle_moments(lambda f: student_t.logpdf(0.0 - f, 4.0, scale=0.5), 3.0, 0.5)
    assert moments.log_z0[0] == pytest.approx(log_z0, abs=1e-8)
    assert moments.mean[0] == pytest.approx(mean, abs=1e-6)
    assert moments.var[0] == pytest.approx(var, abs=1e-6)


@pytest.mark.parametrize('censored', [False, True])
def test_log_logistic_moments_against_dense_trapezoid(censored):
    y, mu, v = 1.5, 0.2, 0.8
    cens = np.array([censored])
    moments = likelihood_moments(y, mu, v, LOG_LOGISTIC, cens)
    log_z0, mean, var = _oracle_moments(
        lambda f: loglik(np.full(f.shape, y), f, LOG_LOGISTIC, np.full(f.shape, censored))[0], mu, v)
    assert moments.log_z0[0] == pytest.approx(log_z0, abs=1e-6)
    assert moments.mean[0] == pytest.approx(mean, abs=1e-6)
    assert moments.var[0] == pytest.approx(var, abs=1e-6)


def test_predictive_cdf():
    assert predictive_cdf(0.0, 0.0, 1.0, gaussian_spec(1.0))[0] == pytest.approx(0.5)
    assert predictive_cdf(np.inf, 0.0, 1.0, gaussian_spec(1.0))[0] == 1.0
    with pytest.raises(UnsupportedOperationError):
        predictive_cdf(1.0, 0.0, 1.0, LikelihoodSpec('probit'))


def test_student_t_predictive_cdf_against_quad():
    expected, _ = sp_integrate.quad(lambda f: norm.pdf(f, 0.0, np.sqrt(0.5)) * student_t.cdf((1.0 - f) / 0.5, 4.0),
                                    -12, 12, epsabs=1e-12)
    assert predictive_cdf(1.0, 0.0, 0.5, STUDENT_T)[0] == pytest.approx(expected, abs=1e-6)


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        LikelihoodSpec('poisson')
    with pytest.raises(InvalidInputError):
        LikelihoodSpec('gaussian', (0.0, 1.0))
    with pytest.raises(InvalidInputError):
        LikelihoodSpec('student-t', nu=-1.0)
