import json

import numpy as np
import pandas as pd
import pytest

from src.config import ExperimentConfig, SweepSpec, parse_method
from src.main import App
from src.operations.assessment import compare
from src.operations.errors import EXIT_INPUT_ERROR, EXIT_OK, InvalidInputError
from src.operations.report import LooReport
from src.templates.outputs import comparison_columns, sweep_columns

SE = [{"kind": "squared-exponential", "magnitude": 1.0, "length_scales": [1.0]}]


def _config(tmp_path, name='config.json', **fields):
    payload = {"data": "regression", "n": 20, "kernel": SE,
               "likelihood": {"kind": "gaussian", "noise_variance": 0.5}, **fields}
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def test_fit_output_is_reproducible(tmp_path):
    config = _config(tmp_path)
    for out in ('a', 'b'):
        assert App().run(['fit', '--config', config, '--out', str(tmp_path / out), '--seed', '3']) == EXIT_OK
    first = (tmp_path / 'a' / 'summary.json').read_bytes()
    assert first == (tmp_path / 'b' / 'summary.json').read_bytes()
    summary = json.loads(first)
    assert summary['schema_version'] == '1.0'
    assert summary['data']['n'] == 20
    assert (tmp_path / 'a' / 'timing.json').exists()


def test_invalid_csv_is_an_input_error(tmp_path, caplog):
    path = tmp_path / 'data.csv'
    path.write_text("x1,y\nabc,1.0\n")
    assert App().run(['fit', '--data', str(path), '--out', str(tmp_path / 'out')]) == EXIT_INPUT_ERROR
    assert ':2:' in caplog.text


def test_missing_config_and_bad_arguments(tmp_path):
    assert App().run(['loo', '--config', str(tmp_path / 'missing.json')]) == EXIT_INPUT_ERROR
    assert App().run(['unknown-command']) == EXIT_INPUT_ERROR
    assert App().run(['loo', '--data', 'regression', '--methods', 'la-loo:local']) == EXIT_INPUT_ERROR


def test_loo_estimators_agree_on_gaussian_data(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, methods=["brute-force", "gaussian-exact", "la-loo", "ep-loo", "q-loo"])
    assert App().run(['loo', '--config', config, '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out / 'comparison.csv')
    assert list(frame.columns) == comparison_columns
    assert len(frame) == 5
    assert np.all(np.abs(frame['bias']) < 1e-4)
    report = json.loads((out / 'loo_q-loo_gaussian.json').read_text())
    assert report['n'] == 20
    assert report['failures'] == {}


def test_loo_over_a_ccd_design(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, hyperparameters="ccd", methods=["la-loo"], reference="gaussian-exact")
    assert App().run(['loo', '--config', config, '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out / 'comparison.csv')
    assert abs(frame.loc[0, 'bias']) < 1e-6
    assert 0 < frame.loc[0, 'min_rel_ess'] <= 1
    report = json.loads((out / 'loo_la-loo.json').read_text())
    assert report['method'] == 'hierarchical-la-loo'


def test_length_scale_sweep(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, data="classification", likelihood={"kind": "probit"},
                     methods=["brute-force", "la-loo"], sweep={"kind": "length-scale", "values": [0.5, 1.0, 2.0]})
    assert App().run(['sweep', '--config', config, '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out / 'sweep.csv')
    assert list(frame.columns) == sweep_columns
    assert len(frame) == 1 + 3 * 2
    assert frame.loc[0, 'method'] == 'map'
    assert set(frame['status']) == {'ok'}
    brute = frame[frame['method'] == 'brute-force']
    np.testing.assert_allclose(brute['bias'], 0.0)


def test_marginal_estimators_degrade_in_flexible_models(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, data="classification", n=40, likelihood={"kind": "probit"},
                     methods=["brute-force", "la-loo", "waic-v"], sweep={"kind": "length-scale", "values": [0.1, 0.25, 1.0]})
    assert App().run(['sweep', '--config', config, '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out / 'sweep.csv')
    flexible = frame[frame['multiplier'] == 0.1].set_index('method')
    assert abs(flexible.loc['waic-v:gaussian', 'bias']) > abs(flexible.loc['la-loo', 'bias'])
    assert abs(flexible.loc['la-loo', 'bias']) < 1.0
    rigid = frame[frame['multiplier'] == 1.0]
    assert flexible['p_eff_over_n'].iloc[0] > rigid['p_eff_over_n'].iloc[0]


def test_sweep_output_does_not_depend_on_workers(tmp_path):
    config = _config(tmp_path, data="classification", likelihood={"kind": "probit"},
                     methods=["brute-force", "la-loo"], sweep={"kind": "length-scale", "values": [0.5, 1.0, 2.0]})
    for workers in ('1', '3'):
        argv = ['sweep', '--config', config, '--out', str(tmp_path / workers), '--workers', workers]
        assert App().run(argv) == EXIT_OK
    assert (tmp_path / '1' / 'sweep.csv').read_bytes() == (tmp_path / '3' / 'sweep.csv').read_bytes()


def test_ccd_output_does_not_depend_on_workers(tmp_path):
    config = _config(tmp_path, hyperparameters="ccd", methods=["la-loo"], reference="gaussian-exact")
    for workers in ('1', '3'):
        argv = ['loo', '--config', config, '--out', str(tmp_path / workers), '--workers', workers]
        assert App().run(argv) == EXIT_OK
    for name in ('comparison.csv', 'loo_la-loo.json'):
        assert (tmp_path / '1' / name).read_bytes() == (tmp_path / '3' / name).read_bytes()


def test_comparison_csv_regenerates_from_the_reports(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, methods=["brute-force", "la-loo", "q-loo", "waic-v"])
    assert App().run(['loo', '--config', config, '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out / 'comparison.csv')

    def load(tag):
        return LooReport.from_dict(json.loads((out / f"loo_{tag.replace(':', '_')}.json").read_text()))

    reference = load('brute-force')
    for row in frame.itertuples(index=False):
        report = load(row.method)
        stats = compare(reference, report)
        assert row.bias == pytest.approx(stats.bias, rel=1e-9, abs=1e-12)
        assert row.std == pytest.approx(stats.std, rel=1e-9, abs=1e-12)
        assert row.n_failures == len(report.failures)
        if report.p_eff_over_n is None:
            assert np.isnan(row.p_eff_over_n)
        else:
            assert row.p_eff_over_n == pytest.approx(report.p_eff_over_n, rel=1e-9)


def test_sweep_csv_parses_back_unchanged(tmp_path):
    out = tmp_path / 'out'
    config = _config(tmp_path, methods=["brute-force", "la-loo"], sweep={"kind": "length-scale", "values": [0.5, 1.0, 2.0]})
    assert App().run(['sweep', '--config', config, '--out', str(out)]) == EXIT_OK
    text = (out / 'sweep.csv').read_text()
    frame = pd.read_csv(out / 'sweep.csv')
    assert frame.to_csv(index=False, float_format='%.12g', na_rep='NA') == text
    means = frame[frame['method'] != 'map'].groupby('method')['bias'].mean()
    assert set(means.index) == {'brute-force', 'la-loo'}
    assert means['brute-force'] == 0.0


def test_nu_sweep_needs_student_t(tmp_path):
    config = _config(tmp_path)
    argv = ['sweep', '--config', config, '--out', str(tmp_path / 'out'), '--kind', 'nu', '--values', '2,4,8']
    assert App().run(argv) == EXIT_INPUT_ERROR


def test_method_parsing():
    assert parse_method('q-loo').tag == 'q-loo:gaussian'
    assert parse_method('cumulant-4:local').order == 4
    assert parse_method('ep-loo').marginals is None
    for text in ('cumulant-7', 'la-loo:local', 'q-loo:student', 'psis-loo'):
        with pytest.raises(InvalidInputError):
            parse_method(text)


def test_sweep_values_are_validated():
    assert SweepSpec('nu', [2, 4, 8]).values == (2.0, 4.0, 8.0)
    for values in ([1.0, 2.0], [1.0, 0.5, 2.0], [0.0, 1.0, 2.0], [1.0, 1.0, 2.0]):
        with pytest.raises(InvalidInputError):
            SweepSpec('length-scale', values)


def test_config_rejects_unknown_fields(tmp_path):
    path = _config(tmp_path, colour="blue")
    with pytest.raises(InvalidInputError, match='unknown config fields'):
        ExperimentConfig.from_json(path)
    with pytest.raises(InvalidInputError):
        ExperimentConfig(data='regression', hyperparameters='sample-file')
