import logging
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, NotPositiveDefiniteError

logger = logging.getLogger('kernels')

KERNEL_KINDS = ('constant', 'linear', 'squared-exponential')

# Jitter escalation: relative to the mean diagonal, x10 per attempt
MAX_RELATIVE_JITTER = 1e-4


@dataclass(frozen=True)
class KernelSpec:
    """
        One covariance term. Magnitudes are variances stored as log values;
        squared-exponential length-scales are either shared (length 1) or per covariate (length d).
    """
    kind: str
    log_magnitude: float = 0.0
    log_length_scales: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidInputError(f"unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}")
        scales = tuple(float(v) for v in np.atleast_1d(self.log_length_scales))
        if self.kind == 'squared-exponential':
            if len(scales) == 0:
                scales = (0.0,)
        elif scales:
            raise InvalidInputError(f"{self.kind} kernel takes no length-scales")
        object.__setattr__(self, 'log_length_scales', scales)
        object.__setattr__(self, 'log_magnitude', float(self.log_magnitude))

    @property
    def n_params(self) -> int:
        return 1 + len(self.log_length_scales)

    def params(self) -> np.ndarray:
        return np.array((self.log_magnitude,) + self.log_length_scales)

    def with_params(self, values: Sequence[float]) -> 'KernelSpec':
        values = [float(v) for v in values]
        return replace(self, log_magnitude=values[0], log_length_scales=tuple(values[1:]))

    def param_names(self, prefix: str) -> List[str]:
        names = [f"{prefix}{self.kind}.log_magnitude"]
        if len(self.log_length_scales) == 1:
            names.append(f"{prefix}{self.kind}.log_length_scale")
        else:
            names += [f"{prefix}{self.kind}.log_length_scale_{j + 1}" for j in range(len(self.log_length_scales))]
        return names

    def check_dimension(self, d: int) -> None:
        if self.kind == 'squared-exponential' and len(self.log_length_scales) not in (1, d):
            raise InvalidInputError(f"squared-exponential has {len(self.log_length_scales)} length-scales for d={d}")

    def evaluate(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        magnitude = np.exp(self.log_magnitude)
        if self.kind == 'constant':
            return np.full((x1.shape[0], x2.shape[0]), magnitude)
        if self.kind == 'linear':
            return magnitude * (x1 @ x2.T)
        ell = np.exp(np.asarray(self.log_length_scales))
        return magnitude * np.exp(-0.5 * cdist(x1 / ell, x2 / ell, 'sqeuclidean'))


@dataclass(frozen=True)
class CompositeKernel:
    """Sum of kernel terms plus the starting relative jitter for the diagonal."""
    components: Tuple[KernelSpec, ...]
    jitter: float = 1e-10

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise InvalidInputError("a composite kernel needs at least one component")
        if not self.jitter > 0:
            raise InvalidInputError("jitter must be positive")
        object.__setattr__(self, 'components', components)

    @property
    def n_params(self) -> int:
        return sum(c.n_params for c in self.components)

    def params(self) -> np.ndarray:
        return np.concatenate([c.params() for c in self.components])

    def with_params(self, theta: Sequence[float]) -> 'CompositeKernel':
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"kernel expects {self.n_params} parameters, got {theta.shape}")
        updated, start = [], 0
        for c in self.components:
            updated.append(c.with_params(theta[start:start + c.n_params]))
            start += c.n_params
        return replace(self, components=tuple(updated))

    def param_names(self) -> List[str]:
        names = []
        for i, c in enumerate(self.components):
            names += c.param_names(f"k{i}.")
        return names

    def scale_length_scales(self, multiplier: float) -> 'CompositeKernel':
        """Multiply every squared-exponential length-scale by `multiplier`."""
        shift = np.log(multiplier)
        updated = [
            replace(c, log_length_scales=tuple(v + shift for v in c.log_length_scales))
            if c.kind == 'squared-exponential' else c
            for c in self.components
        ]
        return replace(self, components=tuple(updated))


KernelLike = Union[KernelSpec, CompositeKernel]


def as_composite(k: KernelLike) -> CompositeKernel:
    return k if isinstance(k, CompositeKernel) else CompositeKernel((k,))


def _check_x(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("covariates contain non-finite entries")
    return x


def cross_covariance(x1: np.ndarray, x2: np.ndarray, k: KernelLike) -> np.ndarray:
    """Noise-free covariance between two sets of inputs (no jitter)."""
    x1, x2 = _check_x(x1), _check_x(x2)
    kernel = as_composite(k)
    for c in kernel.components:
        c.check_dimension(x1.shape[1])
    return sum(c.evaluate(x1, x2) for c in kernel.components)


def prior_variance(x: np.ndarray, k: KernelLike) -> np.ndarray:
    x = _check_x(x)
    return np.array([cross_covariance(row[None, :], row[None, :], k)[0, 0] for row in x])


def build_covariance(x: np.ndarray, k: KernelLike) -> np.ndarray:
    """
        Build the n x n prior covariance and make it Cholesky-factorizable.
        Jitter policy:
            - Start at k.jitter times the mean diagonal.
            - Multiply by 10 after each failed Cholesky, up to 1e-4 times the mean diagonal.
            - Give up with NotPositiveDefiniteError.
    """
    kernel = as_composite(k)
    x = _check_x(x)
    raw = cross_covariance(x, x, kernel)
    raw = 0.5 * (raw + raw.T)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("kernel parameters produce non-finite covariances")

    mean_diag = float(np.mean(np.diag(raw)))
    if mean_diag <= 0:
        raise NotPositiveDefiniteError(f"mean prior variance {mean_diag:.3e} is not positive")
    relative = kernel.jitter
    while relative <= MAX_RELATIVE_JITTER * (1 + 1e-9):
        candidate = raw + relative * mean_diag * np.eye(x.shape[0])
        try:
            scipy.linalg.cholesky(candidate, lower=True)
            if relative > kernel.jitter:
                logger.debug(f"Covariance needed relative jitter {relative:.0e}")
            return candidate
        except np.linalg.LinAlgError:
            relative *= 10
    logger.error(f"Cholesky failed up to relative jitter {MAX_RELATIVE_JITTER:.0e} (n={x.shape[0]})")
    raise NotPositiveDefiniteError(f"covariance is not positive definite after jitter up to {MAX_RELATIVE_JITTER:.0e}")


def default_kernel(d: int, ard: bool = True) -> CompositeKernel:
    """Constant + linear + squared-exponential, the model used for the classification and survival studies."""
    return CompositeKernel((
        KernelSpec('constant', 0.0),
        KernelSpec('linear', np.log(0.1)),
        KernelSpec('squared-exponential', 0.0, (0.0,) * (d if ard else 1)),
    ))


def kernel_from_dict(entries: List[dict], d: int, jitter: float = 1e-10) -> CompositeKernel:
    """
        Build a composite kernel from its JSON description, e.g.
        [{"kind": "squared-exponential", "magnitude": 1.0, "length_scales": [0.5, 0.5]}].
        Values are given on the natural scale; `"ard": true` expands one length-scale to d.
    """
    components = []
    for entry in entries:
        kind = entry.get('kind')
        magnitude = float(entry.get('magnitude', 1.0))
        if magnitude <= 0:
            raise InvalidInputError(f"kernel magnitude must be positive, got {magnitude}")
        scales = ()
        if kind == 'squared-exponential':
            scales = np.atleast_1d(np.asarray(entry.get('length_scales', [1.0]), dtype=float))
            if np.any(scales <= 0):
                raise InvalidInputError("length-scales must be positive")
            if entry.get('ard', False) and scales.size == 1:
                scales = np.repeat(scales, d)
            scales = tuple(np.log(scales))
        spec = KernelSpec(kind, np.log(magnitude), scales)
        spec.check_dimension(d)
        components.append(spec)
    return CompositeKernel(tuple(components), jitter)
