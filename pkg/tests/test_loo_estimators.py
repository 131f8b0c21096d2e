import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal, norm

from src.operations.assessment import compare, diagnostics
from src.operations.brute_force import BruteForceLoo, NOT_REQUESTED, merge_refits
from src.operations.dataset import Dataset
from src.operations.errors import InvalidInputError
from src.operations.laplace import laplace_fit
from src.operations.likelihoods import LikelihoodSpec, gaussian_spec
from src.operations.loo import (Marginals, TruncationConfig, cumulant_series_loo, ep_loo, gaussian_exact_loo, la_loo,
                                log_predictive_moments, q_loo, ratio_diverges, tq_loo, waic)
from src.operations.model import GPModel
from src.operations.registry import ripley
from src.operations.report import LooReport
from tests.conftest import se_kernel

ORIGIN = Dataset(np.array([[0.0]]), np.array([0.0]))
LOG_HALF_OVER_SQRT_PI = -np.log(2 * np.sqrt(np.pi))


def _analytic_marginals(var=0.5):
    return Marginals.gaussian(np.array([0.0]), np.array([var]), ORIGIN, gaussian_spec(1.0))


def test_gaussian_exact_single_point():
    result = gaussian_exact_loo(np.array([[1.0]]), 1.0, np.array([0.0]))
    assert result.lpd[0] == pytest.approx(LOG_HALF_OVER_SQRT_PI, abs=1e-12)
    assert result.mean[0] == pytest.approx(0.0)
    assert result.var[0] == pytest.approx(1.0)


def test_gaussian_exact_two_points():
    result = gaussian_exact_loo(np.eye(2), 1.0, np.array([1.0, -1.0]))
    np.testing.assert_allclose(result.lpd, LOG_HALF_OVER_SQRT_PI - 0.25, atol=1e-12)
    np.testing.assert_allclose(result.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(result.var, 1.0)


def test_conditional_estimators_agree_on_gaussian(regression_model):
    data = regression_model.data
    fm = regression_model.fit()
    exact = gaussian_exact_loo(fm.K, 0.5, data.y).lpd
    la = la_loo(fm.state, data, fm.likelihood)
    np.testing.assert_allclose(la.lpd, exact, atol=1e-8)
    np.testing.assert_allclose(la_loo(fm.state, data, fm.likelihood, route='site-removal').lpd, exact, atol=1e-8)
    ep_fm = regression_model.with_method('ep').fit()
    np.testing.assert_allclose(ep_loo(ep_fm.state, data, ep_fm.likelihood).lpd, exact, atol=1e-5)
    brute = BruteForceLoo(regression_model, fm.hp).run()
    np.testing.assert_allclose(brute.lpd, exact, atol=1e-8)
    q = q_loo(Marginals.from_state(fm.state, data, fm.likelihood))
    np.testing.assert_allclose(q.lpd, exact, atol=1e-6)
    assert q.unstable == []


def test_la_loo_reports_pit_for_continuous_models(regression_model, probit_model):
    fm = regression_model.fit()
    report = la_loo(fm.state, regression_model.data, fm.likelihood)
    assert report.pit is not None and np.all((report.pit >= 0) & (report.pit <= 1))
    probit_fm = probit_model.fit()
    assert la_loo(probit_fm.state, probit_model.data, probit_fm.likelihood).pit is None


def test_la_loo_probit_single_point():
    data = Dataset(np.array([[0.0]]), np.array([1.0]))
    state = laplace_fit(data, np.array([[1.0]]), LikelihoodSpec('probit'))
    report = la_loo(state, data, LikelihoodSpec('probit'))
    assert report.lpd[0] == pytest.approx(np.log(0.5), abs=1e-8)


def test_brute_force_single_point_is_the_prior_predictive():
    model = GPModel(Dataset(np.array([[0.0]]), np.array([0.7])), se_kernel(), gaussian_spec(0.5))
    brute = BruteForceLoo(model, model.hyperparams())
    report = brute.run()
    expected = norm.logpdf(0.7, 0.0, np.sqrt(brute.K[0, 0] + 0.5))
    assert report.lpd[0] == pytest.approx(expected, abs=1e-10)


def test_brute_force_subset_and_workers(regression_model):
    hp = regression_model.hyperparams()
    serial = BruteForceLoo(regression_model, hp).run()
    threaded = BruteForceLoo(regression_model, hp, workers=3).run()
    np.testing.assert_array_equal(serial.lpd, threaded.lpd)
    partial = BruteForceLoo(regression_model, hp).run(indices=[2, 5], with_training=False)
    assert partial.failures[0] == NOT_REQUESTED
    assert partial.lpd[2] == serial.lpd[2]


def test_merge_refits_fills_failed_points():
    report = LooReport('la-loo', np.array([-1.0, np.nan, -2.0]), {1: 'cavity failure'})
    refits = LooReport('brute-force-laplace', np.array([np.nan, -1.5, np.nan]))
    merged = merge_refits(report, refits)
    np.testing.assert_array_equal(merged.lpd, [-1.0, -1.5, -2.0])
    assert merged.failures == {}
    assert merged.refit == [1]


def test_q_loo_on_a_closed_form_marginal():
    report = q_loo(_analytic_marginals())
    assert report.lpd[0] == pytest.approx(LOG_HALF_OVER_SQRT_PI, abs=1e-8)
    assert report.unstable == []


def test_q_loo_flags_a_divergent_ratio():
    marginals = _analytic_marginals(1.5)
    assert ratio_diverges(marginals)[0]
    report = q_loo(marginals)
    assert report.unstable == [0]
    assert np.isfinite(report.lpd[0])


def _probit_marginal(var):
    data = Dataset(np.array([[0.0]]), np.array([1.0]))
    return Marginals.gaussian(np.array([0.0]), np.array([var]), data, LikelihoodSpec('probit'))


def test_q_loo_probit_ratio_converges_below_unit_variance():
    for var in (0.5, 0.9):
        marginals = _probit_marginal(var)
        assert not ratio_diverges(marginals)[0]
        report = q_loo(marginals)
        assert report.unstable == []
        ratio, _ = quad(lambda f: np.exp(norm.logpdf(f, 0.0, np.sqrt(var)) - norm.logcdf(f)), -np.inf, np.inf)
        assert report.lpd[0] == pytest.approx(-np.log(ratio), rel=1e-5)


def test_q_loo_probit_ratio_diverges_above_unit_variance():
    for var in (1.5, 3.0):
        marginals = _probit_marginal(var)
        assert ratio_diverges(marginals)[0]
        assert q_loo(marginals).unstable == [0]


def test_q_loo_with_local_marginals_matches_la_loo(probit_model):
    fm = probit_model.fit()
    data = probit_model.data
    expected = la_loo(fm.state, data, fm.likelihood).lpd
    local = q_loo(Marginals.from_state(fm.state, data, fm.likelihood, 'local'))
    np.testing.assert_allclose(local.lpd, expected, atol=1e-6)


def test_tq_loo_limits():
    marginals = _analytic_marginals()
    untruncated = tq_loo(marginals, TruncationConfig(fixed_c=0.0))
    assert untruncated.lpd[0] == pytest.approx(q_loo(marginals).lpd[0], abs=1e-6)
    flat = tq_loo(marginals, TruncationConfig(fixed_c=1e10))
    assert flat.lpd[0] == pytest.approx(norm.logpdf(0.0, 0.0, np.sqrt(1.5)), abs=1e-6)
    with pytest.raises(InvalidInputError):
        TruncationConfig(c0=0.0)


def test_waic_on_a_closed_form_marginal():
    marginals = _analytic_marginals()
    assert waic(marginals, 'G').lpd[0] == pytest.approx(-1.2162, abs=1e-4)
    assert waic(marginals, 'V').lpd[0] == pytest.approx(-1.2466, abs=1e-4)
    assert waic(marginals).training_lpd[0] == pytest.approx(norm.logpdf(0.0, 0.0, np.sqrt(1.5)), abs=1e-8)
    with pytest.raises(InvalidInputError):
        waic(marginals, 'X')


def test_cumulant_partial_sums_approach_the_exact_value():
    series, report = cumulant_series_loo(_analytic_marginals(), 3)
    np.testing.assert_allclose([series.partial_sum(k)[0] for k in (1, 2, 3)], [-1.1689, -1.2314, -1.2522], atol=1e-4)
    errors = [abs(series.partial_sum(k)[0] - LOG_HALF_OVER_SQRT_PI) for k in (1, 2, 3)]
    assert errors[0] > errors[1] > errors[2]
    assert report.lpd[0] == series.partial_sum(3)[0]
    assert report.method == 'cumulant-3:gaussian'


def test_cumulant_series_and_waic_share_moments():
    marginals = _analytic_marginals()
    cumulants, log_mean = log_predictive_moments(marginals, 2)
    assert waic(marginals, 'V').lpd[0] == pytest.approx(log_mean[0] - cumulants[0, 1], abs=1e-12)


def test_cumulant_order_is_capped():
    with pytest.raises(InvalidInputError):
        cumulant_series_loo(_analytic_marginals(), 7)


def test_compare():
    reference = LooReport('brute-force', np.array([-1.0, -2.0]))
    same = compare(reference, reference)
    assert (same.bias, same.std) == (0.0, 0.0)
    shifted = compare(reference, LooReport('q-loo:gaussian', np.array([0.0, -3.0])))
    assert shifted.bias == pytest.approx(0.0)
    assert shifted.std == pytest.approx(np.sqrt(2.0))
    with pytest.raises(InvalidInputError):
        compare(reference, LooReport('q-loo:gaussian', np.array([0.0])))


def test_compare_skips_failed_points():
    reference = LooReport('brute-force', np.array([-1.0, -2.0, -3.0]))
    candidate = LooReport('la-loo', np.array([-1.5, np.nan, -3.0]), {1: 'cavity failure'})
    stats = compare(reference, candidate)
    assert stats.bias == pytest.approx(-0.5)
    assert stats.excluded == [1]
    assert stats.n_compared == 2


def test_diagnostics_rules():
    train = np.full(10, -0.9)
    assert diagnostics(LooReport('q-loo:gaussian', train.copy(), training_lpd=train)) == []
    flexible = LooReport('q-loo:gaussian', np.full(10, -1.0), training_lpd=train)
    assert any('likely biased' in m for m in diagnostics(flexible))
    exempt = LooReport('ep-loo', np.full(10, -1.0), training_lpd=train)
    messages = diagnostics(exempt)
    assert not any('likely biased' in m for m in messages)
    assert any(m.startswith('note') for m in messages)
    point = LooReport('la-loo', np.r_[-1.2, np.full(99, -0.9)], training_lpd=np.full(100, -0.9))
    assert any('p_eff_i' in m for m in diagnostics(point))


def test_report_json_keeps_failures():
    report = LooReport('la-loo', np.array([-1.0, np.nan]), {1: 'cavity failure'}, unstable=[0])
    restored = LooReport.from_dict(report.to_dict())
    assert restored.failures == {1: 'cavity failure'}
    assert np.isnan(restored.lpd[1])
    assert restored.unstable == [0]


def test_ripley_la_loo_stays_close_to_brute_force():
    data = ripley(n=100, seed=2)
    model = GPModel(data, se_kernel(1.0, 0.5), LikelihoodSpec('probit'))
    fm = model.fit()
    la = la_loo(fm.state, data, fm.likelihood)
    brute = BruteForceLoo(model, fm.hp).run()
    assert abs(compare(brute, la).bias) <= 1.0


def test_multivariate_gaussian_oracle_for_exact_loo(regression_model):
    data = regression_model.data
    K = regression_model.fit().K
    exact = gaussian_exact_loo(K, 0.5, data.y).lpd
    C = K + 0.5 * np.eye(data.n)
    i = 4
    keep = np.arange(data.n) != i
    full = multivariate_normal.logpdf(data.y, np.zeros(data.n), C)
    rest = multivariate_normal.logpdf(data.y[keep], np.zeros(data.n - 1), C[np.ix_(keep, keep)])
    assert exact[i] == pytest.approx(full - rest, abs=1e-8)
