import argparse
import json
import logging
import os
from typing import List, Optional

from src.config import ExperimentConfig, env_settings
from src.operations.errors import EXIT_INFERENCE_FAILURE, EXIT_INPUT_ERROR, EXIT_OK, GPLooError, InvalidInputError
from src.operations.runner import ExperimentRunner
from src.templates.outputs import fit_summary, loo_summary_header, loo_summary_row, sweep_summary

logger = logging.getLogger('main')


class App:
    """Command-line front end: fit, loo and sweep subcommands over one experiment config."""

    def __init__(self):
        self.env = env_settings()
        logging.getLogger().setLevel(self.env.log_level)

    def parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog='gp-loo',
            description='Fit Gaussian latent variable models and compare fast leave-one-out estimators.')
        commands = parser.add_subparsers(dest='command', required=True)
        for name, help_text in (
                ('fit', 'Fit hyperparameters and the latent posterior; write summary.json.'),
                ('loo', 'Compute the requested LOO estimators and compare them with the reference.'),
                ('sweep', 'Vary model flexibility and record each estimator\'s bias against brute force.')):
            sub = commands.add_parser(name, help=help_text)
            sub.add_argument('--config', help='Experiment JSON document.')
            sub.add_argument('--data', help='Dataset CSV path or registry name (overrides the config).')
            sub.add_argument('--out', help='Output directory.')
            sub.add_argument('--seed', type=int, help='Seed for synthetic data.')
            sub.add_argument('--methods', help='Comma-separated LOO methods, e.g. brute-force,la-loo,q-loo:local.')
            sub.add_argument('--workers', type=int, help='Worker threads for refits and design points.')
            sub.add_argument('--method', choices=['laplace', 'ep'], help='Latent approximation.')
            sub.add_argument('--hyperparameters', choices=['map', 'ccd', 'grid', 'sample-file'],
                             help='Hyperparameter handling.')
            if name == 'sweep':
                sub.add_argument('--kind', choices=['length-scale', 'nu'], help='What the sweep varies.')
                sub.add_argument('--values', help='Comma-separated ascending sweep values.')
        return parser

    def load_config(self, args: argparse.Namespace) -> ExperimentConfig:
        if args.config:
            config = ExperimentConfig.from_json(args.config)
        elif args.data:
            config = ExperimentConfig(data=args.data)
        else:
            raise InvalidInputError("either --config or --data is required")
        methods = None
        if args.methods:
            methods = tuple(m.strip() for m in args.methods.split(',') if m.strip())
            if not methods:
                raise InvalidInputError("--methods lists no method")
        sweep = None
        if getattr(args, 'kind', None) or getattr(args, 'values', None):
            sweep = dict(config.sweep or {})
            if args.kind:
                sweep['kind'] = args.kind
            if args.values:
                try:
                    sweep['values'] = [float(v) for v in args.values.split(',')]
                except ValueError:
                    raise InvalidInputError(f"--values must be comma-separated numbers, got '{args.values}'")
        config = config.override(data=args.data, output=args.out, seed=args.seed, methods=methods,
                                 workers=args.workers, method=args.method, hyperparameters=args.hyperparameters,
                                 sweep=sweep)
        return config.resolved(self.env)

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Parse arguments, run the subcommand and return the process exit code."""
        try:
            args = self.parser().parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_INPUT_ERROR
        try:
            config = self.load_config(args)
            runner = ExperimentRunner(config)
            if args.command == 'fit':
                self.fit(runner)
            elif args.command == 'loo':
                self.loo(runner)
            else:
                self.sweep(runner)
        except (InvalidInputError, OSError, json.JSONDecodeError) as e:
            logger.error(f"Input error: {e}")
            return EXIT_INPUT_ERROR
        except GPLooError as e:
            logger.error(f"Inference failure: {e}")
            return EXIT_INFERENCE_FAILURE
        return EXIT_OK

    def fit(self, runner: ExperimentRunner):
        summary = runner.run_fit()
        print(fit_summary.format(
            likelihood=summary['likelihood'], method=summary['method'], n=summary['data']['n'],
            d=summary['data']['d'], handling=summary['handling'], n_samples=len(summary['samples']),
            hyperparameters=', '.join(f"{k}={v:.4g}" for k, v in summary['constrained'].items()),
            log_marginal=summary['log_marginal'] if summary['log_marginal'] is not None else float('nan'),
            path=os.path.join(runner.config.output, 'summary.json')))

    def loo(self, runner: ExperimentRunner):
        reports, frame = runner.run_loo()
        print(loo_summary_header.format(n=runner.data.n, reference=runner.config.reference, n_methods=len(frame)))
        for row in frame.itertuples(index=False):
            print(loo_summary_row.format(method=row.method, sum_lpd=reports[row.method].sum_lpd, bias=row.bias,
                                         std=row.std, n_failures=row.n_failures))

    def sweep(self, runner: ExperimentRunner):
        sweep = runner.config.sweep_spec()
        frame = runner.run_sweep(sweep)
        print(sweep_summary.format(n_points=len(sweep.values), kind=sweep.kind, n_rows=len(frame),
                                   path=os.path.join(runner.config.output, 'sweep.csv')))
