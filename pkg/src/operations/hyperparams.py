import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .errors import InvalidInputError
from .kernels import CompositeKernel
from .likelihoods import LikelihoodSpec

logger = logging.getLogger('hyperparams')

PRIOR_KINDS = ('log-normal', 'flat')


@dataclass(frozen=True)
class HyperParams:
    """
        Kernel parameters theta and likelihood parameters phi on the unconstrained (log) scale.
        The constrained view exponentiates every entry: variances, length-scales, scales and shapes.
    """
    theta: np.ndarray
    phi: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        phi = np.array(self.phi, dtype=float).ravel()
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
            raise InvalidInputError("hyperparameters must be finite")
        names = tuple(self.names) or tuple(f"p{j}" for j in range(theta.size + phi.size))
        if len(names) != theta.size + phi.size:
            raise InvalidInputError(f"{len(names)} names for {theta.size + phi.size} hyperparameters")
        theta.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, 'theta', theta)
        object.__setattr__(self, 'phi', phi)
        object.__setattr__(self, 'names', names)

    @property
    def size(self) -> int:
        return self.theta.size + self.phi.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.phi])

    def with_vector(self, values: Sequence[float]) -> 'HyperParams':
        values = np.asarray(values, dtype=float).ravel()
        if values.size != self.size:
            raise InvalidInputError(f"expected {self.size} hyperparameters, got {values.size}")
        return HyperParams(values[:self.theta.size], values[self.theta.size:], self.names)

    def constrained(self) -> Dict[str, float]:
        return {name: float(np.exp(value)) for name, value in zip(self.names, self.vector())}

    @classmethod
    def from_constrained(cls, values: Mapping[str, float], template: 'HyperParams') -> 'HyperParams':
        missing = [name for name in template.names if name not in values]
        if missing:
            raise InvalidInputError(f"missing hyperparameters {missing}")
        natural = np.array([float(values[name]) for name in template.names])
        if np.any(natural <= 0):
            raise InvalidInputError("constrained hyperparameters must be positive")
        return template.with_vector(np.log(natural))

    def apply(self, kernel: CompositeKernel, likelihood: LikelihoodSpec) -> Tuple[CompositeKernel, LikelihoodSpec]:
        """Return kernel and likelihood carrying these parameter values."""
        if self.theta.size != kernel.n_params or self.phi.size != likelihood.n_params:
            raise InvalidInputError("hyperparameter layout does not match the model")
        return kernel.with_params(self.theta), likelihood.with_params(self.phi)

    def as_dict(self) -> Dict[str, float]:
        return {name: float(value) for name, value in zip(self.names, self.vector())}


def hyperparams_of(kernel: CompositeKernel, likelihood: LikelihoodSpec) -> HyperParams:
    return HyperParams(kernel.params(), likelihood.params(), tuple(kernel.param_names() + likelihood.param_names()))


@dataclass(frozen=True)
class Prior:
    """
        Independent priors on the unconstrained hyperparameters.
        'log-normal' puts N(mean, sd^2) on each log value; 'flat' contributes nothing.
        `overrides` maps a parameter name to its own (mean, sd).
    """
    kind: str = 'log-normal'
    mean: float = 0.0
    sd: float = 3.0
    overrides: Mapping[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise InvalidInputError(f"unknown prior '{self.kind}', expected one of {PRIOR_KINDS}")
        if not self.sd > 0 or any(not sd > 0 for _, sd in self.overrides.values()):
            raise InvalidInputError("prior standard deviations must be positive")

    def log_density(self, hp: HyperParams) -> float:
        if self.kind == 'flat':
            return 0.0
        means, sds = self._moments(hp.names)
        return float(np.sum(norm.logpdf(hp.vector(), means, sds)))

    def _moments(self, names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        means = np.array([self.overrides.get(name, (self.mean, self.sd))[0] for name in names])
        sds = np.array([self.overrides.get(name, (self.mean, self.sd))[1] for name in names])
        return means, sds

    @classmethod
    def from_dict(cls, entry: Mapping) -> 'Prior':
        overrides = {name: (float(v[0]), float(v[1])) for name, v in dict(entry.get('overrides', {})).items()}
        return cls(entry.get('kind', 'log-normal'), float(entry.get('mean', 0.0)), float(entry.get('sd', 3.0)), overrides)


def describe(hp: HyperParams) -> List[str]:
    return [f"{name}={value:.4g}" for name, value in hp.constrained().items()]
