import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from humanfriendly import format_timespan

from src.config import ExperimentConfig, MethodSpec, SweepSpec
from src.templates.outputs import comparison_columns, schema_version, sweep_columns
from .assessment import compare, diagnostics
from .brute_force import BruteForceLoo, merge_refits
from .design import WeightedSampleSet, ccd_design, grid_design, load_sample_file, map_design
from .ep import EPConfig
from .errors import GPLooError, INFERENCE_ERRORS, InvalidInputError, NonConvergenceError
from .hyperparams import HyperParams, describe
from .importance import hierarchical_loo, integrated_log_weights, loo_weight_diagnostics
from .likelihoods import predictive_cdf
from .loo import Marginals, cumulant_series_loo, ep_loo, gaussian_exact_loo, la_loo, q_loo, tq_loo, training_lpd, waic
from .model import FittedModel, GPModel
from .optimize import hessian_scales, map_optimize
from .registry import load_dataset
from .report import LooReport

logger = logging.getLogger('runner')


def _json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + '\n'


def _file_tag(tag: str) -> str:
    return tag.replace(':', '_')


def _failed_report(tag: str, n: int, reason: str) -> LooReport:
    return LooReport(tag, np.full(n, np.nan), {i: reason for i in range(n)})


class ExperimentRunner:
    """
        Runs one experiment configuration end to end.
        Pipeline strategy:
            - Resolve the dataset (registry name or CSV) and build the model from the config.
            - Pick hyperparameters: MAP, CCD or grid around the MAP, or an external sample file.
            - Fit latents per hyperparameter sample, compute every requested LOO estimator and
              combine samples by integrated importance weighting.
            - Compare against the reference estimator and write JSON/CSV outputs.
        Deterministic outputs and wall-clock timings go to separate files.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.data = load_dataset(config.data, config.n, config.d, config.seed)
        self.model = GPModel(self.data, config.kernel_spec(self.data.d), config.likelihood_spec(),
                             config.prior_spec(), config.method, ep_config=EPConfig(nodes=config.nodes))
        self.timings: Dict[str, float] = {}
        self._samples: Optional[WeightedSampleSet] = None
        self._map: Optional[HyperParams] = None
        os.makedirs(config.output, exist_ok=True)
        logger.info(f"Initialized runner: {self.model.likelihood.kind} likelihood, {config.method}, "
                    f"n={self.data.n}, output {config.output}")

    @contextmanager
    def _timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[phase] = self.timings.get(phase, 0.0) + elapsed
            logger.info(f"{phase} took {format_timespan(elapsed)}")

    def _write(self, name: str, text: str) -> str:
        path = os.path.join(self.config.output, name)
        with open(path, 'w') as f:
            f.write(text)
        return path

    def _write_timing(self) -> None:
        self._write('timing.json', _json({k: round(v, 6) for k, v in self.timings.items()}))

    # Hyperparameters

    def map_point(self) -> HyperParams:
        if self._map is None:
            with self._timed('map'):
                self._map = map_optimize(self.model)
        return self._map

    def samples(self) -> WeightedSampleSet:
        """Hyperparameter samples for the configured handling mode."""
        if self._samples is not None:
            return self._samples
        handling = self.config.hyperparameters
        if handling == 'sample-file':
            self._samples = load_sample_file(self.config.sample_file, self.model.hyperparams())
            return self._samples
        center = self.map_point()
        if handling == 'map':
            self._samples = map_design(center)
            return self._samples
        with self._timed('design'):
            scales = hessian_scales(lambda v: self.model.log_posterior(center.with_vector(v)), center.vector())
            if handling == 'ccd':
                self._samples = ccd_design(center, scales, self.model.log_posterior, workers=self.config.workers)
            else:
                self._samples = grid_design(center, scales, self.model.log_posterior, self.config.grid_points,
                                            workers=self.config.workers)
        return self._samples

    # Fit

    def run_fit(self) -> dict:
        """Fit hyperparameters and latents; write summary.json and timing.json."""
        summary = {
            'schema_version': schema_version,
            'data': {'source': self.config.data, 'n': self.data.n, 'd': self.data.d},
            'likelihood': self.model.likelihood.kind,
            'method': self.model.method,
            'handling': self.config.hyperparameters,
            'seed': self.config.seed,
        }
        try:
            samples = self.samples()
            with self._timed('fit'):
                fits = samples.fitted(self.model, self.config.workers)
            if all(fm is None for fm in fits):
                # every sample failed; refit the first to surface the error
                self.model.fit(samples.samples[0])
        except INFERENCE_ERRORS as e:
            logger.error(f"Fit failed: {e}")
            summary['status'] = 'failed'
            summary['error'] = str(e)
            if isinstance(e, NonConvergenceError):
                summary['trace'] = [float(v) for v in e.trace[-20:]]
            self._write('summary.json', _json(summary))
            self._write_timing()
            raise

        best = int(np.argmax(samples.log_weights))
        entries = []
        for hp, weight, fm in zip(samples.samples, samples.weights, fits):
            entries.append({
                'hyperparameters': hp.as_dict(),
                'weight': float(weight),
                'log_marginal': None if fm is None else float(fm.log_marginal),
                'iterations': None if fm is None else int(fm.state.iterations),
            })
        center = fits[best]
        summary.update({
            'status': 'ok',
            'hyperparameters': samples.samples[best].as_dict(),
            'constrained': samples.samples[best].constrained(),
            'log_marginal': None if center is None else float(center.log_marginal),
            'log_posterior': None if center is None else float(self.model.log_posterior(samples.samples[best])),
            'iterations': None if center is None else int(center.state.iterations),
            'samples': entries,
        })
        if center is not None and getattr(center.state, 'flags', None):
            summary['flags'] = {str(i): flag for i, flag in sorted(center.state.flags.items())}
        self._write('summary.json', _json(summary))
        self._write_timing()
        logger.info(f"Fit finished: {', '.join(describe(samples.samples[best]))}")
        return summary

    # LOO

    @staticmethod
    def _fit_for(model: GPModel, fm: FittedModel, method: str) -> FittedModel:
        return fm if fm.method == method else model.with_method(method).fit(fm.hp)

    def conditional_report(self, spec: MethodSpec, fm: FittedModel) -> LooReport:
        """One estimator at one hyperparameter sample."""
        model = fm.model
        nodes, lik = self.config.nodes, fm.likelihood
        if spec.name == 'brute-force':
            return BruteForceLoo(model, fm.hp, workers=self.config.workers).run()
        if spec.name == 'gaussian-exact':
            if lik.kind != 'gaussian':
                return _failed_report(spec.tag, self.data.n, 'gaussian-exact needs the gaussian likelihood')
            result = gaussian_exact_loo(fm.K, float(np.exp(lik.log_params[0])), self.data.y)
            train = training_lpd(Marginals.from_state(fm.state, self.data, lik), nodes)
            pit = predictive_cdf(self.data.y, result.mean, result.var, lik)
            return LooReport('gaussian-exact', result.lpd, pit=pit, training_lpd=train)
        if spec.name == 'la-loo':
            report = la_loo(self._fit_for(model, fm, 'laplace').state, self.data, lik, nodes)
            return self._refit(report, fm, 'laplace')
        if spec.name == 'ep-loo':
            report = ep_loo(self._fit_for(model, fm, 'ep').state, self.data, lik, nodes)
            return self._refit(report, fm, 'ep')
        marginals = Marginals.from_state(fm.state, self.data, lik, spec.marginals, nodes)
        if spec.name == 'q-loo':
            return q_loo(marginals, nodes)
        if spec.name == 'tq-loo':
            return tq_loo(marginals, self.config.truncation_config(), nodes)
        if spec.name in ('waic-g', 'waic-v'):
            return waic(marginals, spec.name[-1], nodes)
        return cumulant_series_loo(marginals, spec.order, nodes)[1]

    def _refit(self, report: LooReport, fm: FittedModel, method: str) -> LooReport:
        if not self.config.refit_failures or not report.failures:
            return report
        indices = sorted(report.failures)
        logger.info(f"{report.method}: refitting {len(indices)} failed points")
        with self._timed('brute-force'):
            refits = BruteForceLoo(fm.model, fm.hp, method, self.config.workers).run(indices, with_training=False)
        return merge_refits(report, refits)

    def method_report(self, spec: MethodSpec) -> Tuple[LooReport, dict]:
        """
            Estimator combined over all hyperparameter samples, plus weight diagnostics.
            A method that fails everywhere comes back as an explicit all-failed report.
        """
        samples = self.samples()
        fits = samples.fitted(self.model, self.config.workers)
        weights = {'min_rel_ess': None, 'khat_max': None}
        per_sample = []
        with self._timed(spec.tag):
            for s, fm in enumerate(fits):
                if fm is None:
                    per_sample.append(_failed_report(spec.tag, self.data.n, f'fit failed at sample {s}'))
                    continue
                try:
                    per_sample.append(self.conditional_report(spec, fm))
                except GPLooError as e:
                    logger.error(f"{spec.tag} failed at sample {s}: {e}")
                    per_sample.append(_failed_report(spec.tag, self.data.n, str(e)))
        if samples.size == 1:
            report = per_sample[0]
        else:
            report = hierarchical_loo(samples, per_sample, smooth=samples.source == 'external-sample-file')
            if report.valid.any():
                diag = loo_weight_diagnostics(samples, integrated_log_weights(samples, per_sample))
                weights = {'min_rel_ess': diag.min_relative_ess, 'khat_max': diag.khat_max}
        report = report.with_warnings(diagnostics(report))
        return report, weights

    def run_loo(self) -> Tuple[Dict[str, LooReport], pd.DataFrame]:
        """Every requested estimator, one JSON report each, and comparison.csv against the reference."""
        specs = self.config.method_specs()
        reference = self.config.reference_spec()
        wanted = specs + ([reference] if reference.tag not in {s.tag for s in specs} else [])
        reports, weights = {}, {}
        for spec in wanted:
            logger.info(f"Computing {spec.tag}")
            reports[spec.tag], weights[spec.tag] = self.method_report(spec)
            self._write(f"loo_{_file_tag(spec.tag)}.json", reports[spec.tag].to_json() + '\n')

        rows = []
        base = reports[reference.tag]
        for spec in specs:
            report = reports[spec.tag]
            try:
                stats = compare(base, report)
                bias, std = stats.bias, stats.std
            except GPLooError as e:
                logger.warning(f"No comparison for {spec.tag}: {e}")
                bias, std = np.nan, np.nan
            rows.append({
                'method': spec.tag,
                'bias': bias,
                'std': std,
                'n_failures': len(report.failures),
                'p_eff_over_n': report.p_eff_over_n,
                'min_rel_ess': weights[spec.tag]['min_rel_ess'],
                'khat_max': weights[spec.tag]['khat_max'],
            })
        frame = pd.DataFrame(rows, columns=comparison_columns)
        frame.to_csv(os.path.join(self.config.output, 'comparison.csv'), index=False, float_format='%.12g')
        self._write_timing()
        return reports, frame

    # Sweep

    def _sweep_rows(self, model: GPModel, hp: HyperParams, multiplier, nu) -> List[dict]:
        fm = model.fit(hp)
        reference = BruteForceLoo(model, hp, workers=self.config.workers).run()
        rows = []
        for spec in self.config.method_specs():
            base = {'multiplier': multiplier, 'nu': nu, 'p_eff_over_n': reference.p_eff_over_n, 'method': spec.tag}
            try:
                report = reference if spec.name == 'brute-force' else self.conditional_report(spec, fm)
                stats = compare(reference, report)
                rows.append({**base, 'bias': stats.bias, 'std': stats.std,
                             'n_failures': len(report.failures), 'status': 'ok'})
            except GPLooError as e:
                logger.warning(f"{spec.tag} failed in sweep at multiplier={multiplier}, nu={nu}: {e}")
                rows.append({**base, 'bias': np.nan, 'std': np.nan, 'n_failures': np.nan, 'status': f"failed: {e}"})
        return rows

    def run_sweep(self, sweep: Optional[SweepSpec] = None) -> pd.DataFrame:
        """
            Flexibility sweep: rescale length-scales (other hyperparameters at the MAP) or refit the MAP
            at each student-t degrees of freedom; bias of every method against brute force per value.
            The row with method 'map' marks the flexibility of the MAP model.
        """
        sweep = sweep or self.config.sweep_spec()
        rows = []
        if sweep.kind == 'length-scale':
            hp = self.map_point()
            with self._timed('sweep'):
                marker = BruteForceLoo(self.model, hp, workers=self.config.workers).run()
                rows.append({'multiplier': 1.0, 'nu': np.nan, 'p_eff_over_n': marker.p_eff_over_n,
                             'method': 'map', 'bias': np.nan, 'std': np.nan, 'n_failures': np.nan, 'status': 'ok'})
                at_map = self.model.at(hp)
                for multiplier in sweep.values:
                    model = replace(at_map, kernel=at_map.kernel.scale_length_scales(multiplier))
                    rows += self._guarded(model, model.hyperparams, multiplier, np.nan)
        else:
            if self.model.likelihood.kind != 'student-t':
                raise InvalidInputError("a degrees-of-freedom sweep needs the student-t likelihood")
            with self._timed('sweep'):
                hp = self.map_point()
                marker = BruteForceLoo(self.model, hp, workers=self.config.workers).run()
                rows.append({'multiplier': np.nan, 'nu': self.model.likelihood.nu,
                             'p_eff_over_n': marker.p_eff_over_n, 'method': 'map', 'bias': np.nan, 'std': np.nan,
                             'n_failures': np.nan, 'status': 'ok'})
                for nu in sweep.values:
                    model = replace(self.model, likelihood=replace(self.model.likelihood, nu=nu))
                    rows += self._guarded(model, lambda m=model: map_optimize(m, hp), np.nan, nu)
        frame = pd.DataFrame(rows, columns=sweep_columns)
        frame.to_csv(os.path.join(self.config.output, 'sweep.csv'), index=False, float_format='%.12g', na_rep='NA')
        self._write_timing()
        return frame

    def _guarded(self, model: GPModel, hp_of, multiplier, nu) -> List[dict]:
        try:
            return self._sweep_rows(model, hp_of(), multiplier, nu)
        except GPLooError as e:
            logger.error(f"Sweep point multiplier={multiplier}, nu={nu} failed: {e}")
            return [{'multiplier': multiplier, 'nu': nu, 'p_eff_over_n': np.nan, 'method': spec.tag,
                     'bias': np.nan, 'std': np.nan, 'n_failures': np.nan, 'status': f"failed: {e}"}
                    for spec in self.config.method_specs()]
