import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from src.templates.outputs import schema_version
from .errors import InvalidInputError

logger = logging.getLogger('report')

MAX_CUMULANT_ORDER = 6


def _frozen(values) -> Optional[np.ndarray]:
    if values is None:
        return None
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


def _json_list(values: Optional[np.ndarray]) -> Optional[list]:
    if values is None:
        return None
    return [None if not np.isfinite(v) else float(v) for v in values]


def _from_json_list(values: Optional[list]) -> Optional[np.ndarray]:
    if values is None:
        return None
    return np.array([np.nan if v is None else v for v in values], dtype=float)


@dataclass(frozen=True)
class LooReport:
    """
        Per-point LOO log predictive densities of one estimator.
        Failed points carry NaN in `lpd` and a reason in `failures`; points flagged as
        numerically unstable keep their value and are listed in `unstable`.
    """
    method: str
    lpd: np.ndarray
    failures: Dict[int, str] = field(default_factory=dict)
    pit: Optional[np.ndarray] = None
    training_lpd: Optional[np.ndarray] = None
    unstable: List[int] = field(default_factory=list)
    refit: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        lpd = _frozen(np.atleast_1d(self.lpd))
        failures = {int(i): str(reason) for i, reason in self.failures.items()}
        if any(not 0 <= i < lpd.size for i in failures):
            raise InvalidInputError("failure index out of range")
        for i in failures:
            if np.isfinite(lpd[i]):
                lpd = lpd.copy()
                lpd[i] = np.nan
                lpd.setflags(write=False)
        missing = np.flatnonzero(~np.isfinite(lpd))
        for i in missing:
            failures.setdefault(int(i), 'non-finite value')
        object.__setattr__(self, 'lpd', lpd)
        object.__setattr__(self, 'failures', dict(sorted(failures.items())))
        object.__setattr__(self, 'pit', _frozen(self.pit))
        object.__setattr__(self, 'training_lpd', _frozen(self.training_lpd))
        object.__setattr__(self, 'unstable', sorted(int(i) for i in self.unstable))
        object.__setattr__(self, 'refit', sorted(int(i) for i in self.refit))
        object.__setattr__(self, 'warnings', list(self.warnings))

    @property
    def n(self) -> int:
        return self.lpd.size

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.lpd)

    @property
    def sum_lpd(self) -> float:
        return float(np.sum(self.lpd[self.valid]))

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.lpd)

    @property
    def p_eff_points(self) -> Optional[np.ndarray]:
        if self.training_lpd is None:
            return None
        return self.training_lpd - self.lpd

    @property
    def p_eff(self) -> Optional[float]:
        points = self.p_eff_points
        if points is None:
            return None
        return float(np.sum(points[self.valid]))

    @property
    def p_eff_over_n(self) -> Optional[float]:
        p_eff = self.p_eff
        if p_eff is None or not self.valid.any():
            return None
        return p_eff / int(self.valid.sum())

    def with_warnings(self, warnings: List[str]) -> 'LooReport':
        return replace(self, warnings=self.warnings + [w for w in warnings if w not in self.warnings])

    def renamed(self, method: str) -> 'LooReport':
        return replace(self, method=method)

    def to_dict(self) -> dict:
        return {
            'schema_version': schema_version,
            'method': self.method,
            'n': self.n,
            'sum_lpd': self.sum_lpd,
            'p_eff': self.p_eff,
            'p_eff_over_n': self.p_eff_over_n,
            'lpd': _json_list(self.lpd),
            'cpo': _json_list(self.cpo),
            'pit': _json_list(self.pit),
            'training_lpd': _json_list(self.training_lpd),
            'failures': {str(i): reason for i, reason in self.failures.items()},
            'unstable': self.unstable,
            'refit': self.refit,
            'warnings': self.warnings,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'LooReport':
        if payload.get('schema_version') != schema_version:
            raise InvalidInputError(f"unsupported report schema {payload.get('schema_version')}")
        return cls(
            payload['method'],
            _from_json_list(payload['lpd']),
            {int(i): reason for i, reason in payload.get('failures', {}).items()},
            _from_json_list(payload.get('pit')),
            _from_json_list(payload.get('training_lpd')),
            payload.get('unstable', []),
            payload.get('refit', []),
            payload.get('warnings', []),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class GaussianLooResult:
    """Exact LOO for the Gaussian observation model."""
    mean: np.ndarray
    var: np.ndarray
    g: np.ndarray
    cbar: np.ndarray
    lpd: np.ndarray

    def report(self, method: str = 'gaussian-exact') -> LooReport:
        return LooReport(method, self.lpd)


@dataclass(frozen=True)
class ComparisonStats:
    """
        Agreement of a candidate estimator with a reference.
        deltas: candidate minus reference per point, NaN where either side failed.
    """
    method: str
    reference: str
    bias: float
    std: float
    deltas: np.ndarray
    excluded: List[int] = field(default_factory=list)

    @property
    def n_compared(self) -> int:
        return int(np.isfinite(self.deltas).sum())


@dataclass(frozen=True)
class CumulantSeries:
    """
        Cumulants of log p(y_i | f) under each point's marginal, kappa_1 first (columns),
        plus the training log predictive density log E[p] per point.
    """
    cumulants: np.ndarray
    log_mean_density: np.ndarray

    @property
    def order(self) -> int:
        return self.cumulants.shape[1]

    def partial_sum(self, k: int) -> np.ndarray:
        """LOO estimate per point from the first k terms of the alternating cumulant series."""
        if not 1 <= k <= self.order:
            raise InvalidInputError(f"partial sum order must lie in 1..{self.order}, got {k}")
        factorials = np.cumprod(np.arange(1, k + 1))
        signs = (-1.0) ** np.arange(k)
        return np.sum(signs * self.cumulants[:, :k] / factorials, axis=1)
