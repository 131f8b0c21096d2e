import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from os import environ
from typing import List, Optional, Tuple

import numpy as np

from src.operations.errors import InvalidInputError
from src.operations.hyperparams import Prior
from src.operations.kernels import CompositeKernel, default_kernel, kernel_from_dict
from src.operations.likelihoods import LIKELIHOOD_KINDS, LikelihoodSpec
from src.operations.loo import MARGINAL_KINDS, TruncationConfig
from src.operations.model import INFERENCE_METHODS
from src.operations.quadrature import DEFAULT_NODES, MIN_NODES
from src.operations.report import MAX_CUMULANT_ORDER

logger = logging.getLogger('config')

HANDLING_MODES = ('map', 'ccd', 'grid', 'sample-file')
SWEEP_KINDS = ('length-scale', 'nu')
# Estimators that take no marginal qualifier
CONDITIONAL_METHODS = ('brute-force', 'gaussian-exact', 'la-loo', 'ep-loo')
MARGINAL_METHODS = ('q-loo', 'tq-loo', 'waic-g', 'waic-v')
_CUMULANT = re.compile(r'^cumulant-(\d+)$')

# Natural-scale likelihood parameter accepted in the JSON document, per kind
_LIKELIHOOD_PARAMETER = {
    'gaussian': 'noise_variance',
    'probit': None,
    'student-t': 'scale',
    'log-logistic-censored': 'shape',
}


@dataclass(frozen=True)
class EnvSettings:
    log_level: str = 'INFO'
    workers: int = 1
    quad_nodes: int = DEFAULT_NODES
    output_dir: str = 'output'


def env_settings() -> EnvSettings:
    """Defaults read from the environment (populated from .env at start-up)."""
    try:
        workers = int(environ.get('GPLOO_WORKERS', '1'))
        nodes = int(environ.get('GPLOO_QUAD_NODES', str(DEFAULT_NODES)))
    except ValueError as e:
        raise InvalidInputError(f"invalid numeric environment setting: {e}")
    return EnvSettings(environ.get('GPLOO_LOG_LEVEL', 'INFO').upper(), max(1, workers), nodes,
                       environ.get('GPLOO_OUTPUT_DIR', 'output'))


@dataclass(frozen=True)
class MethodSpec:
    """A LOO estimator request such as 'la-loo', 'q-loo:local' or 'cumulant-4:gaussian'."""
    name: str
    marginals: Optional[str] = None
    order: Optional[int] = None

    @property
    def tag(self) -> str:
        return self.name if self.marginals is None else f"{self.name}:{self.marginals}"


def parse_method(text: str) -> MethodSpec:
    name, _, marginals = text.strip().partition(':')
    match = _CUMULANT.match(name)
    if name in CONDITIONAL_METHODS:
        if marginals:
            raise InvalidInputError(f"method '{name}' takes no marginal qualifier")
        return MethodSpec(name)
    if name not in MARGINAL_METHODS and not match:
        raise InvalidInputError(f"unknown LOO method '{text}'")
    marginals = marginals or 'gaussian'
    if marginals not in MARGINAL_KINDS:
        raise InvalidInputError(f"unknown marginal kind '{marginals}', expected one of {MARGINAL_KINDS}")
    if match:
        order = int(match.group(1))
        if not 1 <= order <= MAX_CUMULANT_ORDER:
            raise InvalidInputError(f"cumulant order must lie in 1..{MAX_CUMULANT_ORDER}, got {order}")
        return MethodSpec('cumulant', marginals, order)
    return MethodSpec(name, marginals)


@dataclass(frozen=True)
class SweepSpec:
    """Length-scale multipliers or student-t degrees of freedom, sorted ascending, at least three."""
    kind: str = 'length-scale'
    values: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise InvalidInputError(f"unknown sweep kind '{self.kind}', expected one of {SWEEP_KINDS}")
        values = tuple(float(v) for v in self.values)
        if len(values) < 3:
            raise InvalidInputError("a sweep needs at least three values")
        if any(not (np.isfinite(v) and v > 0) for v in values):
            raise InvalidInputError("sweep values must be positive")
        if list(values) != sorted(values) or len(set(values)) != len(values):
            raise InvalidInputError("sweep values must be strictly ascending")
        object.__setattr__(self, 'values', values)


@dataclass(frozen=True)
class ExperimentConfig:
    """
        One experiment: data, model, hyperparameter handling, LOO estimators and outputs.
        Loaded from a JSON document; CLI flags override individual fields.
    """
    data: str
    n: Optional[int] = None
    d: Optional[int] = None
    kernel: Optional[List[dict]] = None
    likelihood: dict = field(default_factory=lambda: {'kind': 'gaussian'})
    method: str = 'laplace'
    hyperparameters: str = 'map'
    sample_file: Optional[str] = None
    grid_points: int = 5
    prior: dict = field(default_factory=dict)
    methods: Tuple[str, ...] = ('brute-force', 'la-loo')
    reference: str = 'brute-force'
    truncation: dict = field(default_factory=dict)
    nodes: Optional[int] = None
    seed: int = 0
    output: Optional[str] = None
    workers: Optional[int] = None
    refit_failures: bool = False
    sweep: Optional[dict] = None

    def __post_init__(self):
        if self.method not in INFERENCE_METHODS:
            raise InvalidInputError(f"unknown inference method '{self.method}', expected one of {INFERENCE_METHODS}")
        if self.hyperparameters not in HANDLING_MODES:
            raise InvalidInputError(f"unknown hyperparameter handling '{self.hyperparameters}', "
                                    f"expected one of {HANDLING_MODES}")
        if self.hyperparameters == 'sample-file':
            if not self.sample_file:
                raise InvalidInputError("hyperparameter handling 'sample-file' needs a sample_file")
            if not os.path.exists(self.sample_file):
                raise InvalidInputError(f"sample file not found: {self.sample_file}")
        methods = tuple(self.methods)
        if not methods:
            raise InvalidInputError("the method list must not be empty")
        for text in methods:
            parse_method(text)
        parse_method(self.reference)
        if self.likelihood.get('kind') not in LIKELIHOOD_KINDS:
            raise InvalidInputError(f"unknown likelihood '{self.likelihood.get('kind')}', "
                                    f"expected one of {LIKELIHOOD_KINDS}")
        if self.nodes is not None and self.nodes < MIN_NODES:
            raise InvalidInputError(f"quadrature needs at least {MIN_NODES} nodes")
        object.__setattr__(self, 'methods', methods)
        object.__setattr__(self, 'seed', int(self.seed))

    @classmethod
    def from_json(cls, path: str) -> 'ExperimentConfig':
        try:
            with open(path) as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise InvalidInputError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{path}:{e.lineno}: malformed JSON ({e.msg})")
        if not isinstance(payload, dict):
            raise InvalidInputError(f"{path}: expected a JSON object")
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"{path}: unknown config fields {sorted(unknown)}")
        if 'data' not in payload:
            raise InvalidInputError(f"{path}: 'data' is required")
        return cls(**payload)

    def override(self, **values) -> 'ExperimentConfig':
        """Apply CLI overrides; None leaves a field unchanged."""
        return replace(self, **{key: value for key, value in values.items() if value is not None})

    def resolved(self, env: EnvSettings) -> 'ExperimentConfig':
        """Fill unset node count, workers and output directory from the environment."""
        return replace(
            self,
            nodes=env.quad_nodes if self.nodes is None else self.nodes,
            workers=env.workers if self.workers is None else max(1, int(self.workers)),
            output=env.output_dir if self.output is None else self.output,
        )

    def method_specs(self) -> List[MethodSpec]:
        return [parse_method(text) for text in self.methods]

    def reference_spec(self) -> MethodSpec:
        return parse_method(self.reference)

    def sweep_spec(self) -> SweepSpec:
        if self.sweep is None:
            return SweepSpec()
        return SweepSpec(self.sweep.get('kind', 'length-scale'), tuple(self.sweep.get('values', SweepSpec.values)))

    def likelihood_spec(self) -> LikelihoodSpec:
        entry = dict(self.likelihood)
        kind = entry.pop('kind')
        nu = float(entry.pop('nu', 4.0))
        name = _LIKELIHOOD_PARAMETER[kind]
        value = entry.pop(name, 1.0) if name else None
        if entry:
            raise InvalidInputError(f"unknown {kind} likelihood settings {sorted(entry)}")
        if value is None:
            return LikelihoodSpec(kind, (), nu)
        if not float(value) > 0:
            raise InvalidInputError(f"likelihood {name} must be positive, got {value}")
        return LikelihoodSpec(kind, (float(np.log(value)),), nu)

    def kernel_spec(self, d: int) -> CompositeKernel:
        return default_kernel(d) if self.kernel is None else kernel_from_dict(self.kernel, d)

    def prior_spec(self) -> Prior:
        return Prior.from_dict(self.prior)

    def truncation_config(self) -> TruncationConfig:
        return TruncationConfig(**self.truncation)
