import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .errors import GPLooError, InvalidInputError
from .hyperparams import HyperParams
from .model import FittedModel, GPModel
from .optimize import CurvatureScales

logger = logging.getLogger('design')

SAMPLE_SOURCES = ('map', 'grid', 'ccd', 'external-sample-file')
CCD_F0 = 1.1
GRID_POINTS = 5
GRID_HALF_WIDTH = 2.5
LOG_WEIGHT_COLUMN = 'log_weight'

LogPosterior = Callable[[HyperParams], float]


@dataclass(frozen=True)
class WeightedSampleSet:
    """
        Hyperparameter points with log-weights approximating p(theta, phi | D) as a weighted sum.
        Latent fits are computed on first request and cached per sample; concurrent requests share one fit.
    """
    samples: Tuple[HyperParams, ...]
    log_weights: np.ndarray
    source: str
    _fits: Dict[int, FittedModel] = field(default_factory=dict, compare=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, compare=False, repr=False)

    def __post_init__(self):
        if self.source not in SAMPLE_SOURCES:
            raise InvalidInputError(f"unknown sample source '{self.source}', expected one of {SAMPLE_SOURCES}")
        log_weights = np.array(self.log_weights, dtype=float).ravel()
        if len(self.samples) == 0:
            raise InvalidInputError("a sample set needs at least one sample")
        if log_weights.size != len(self.samples):
            raise InvalidInputError(f"{log_weights.size} weights for {len(self.samples)} samples")
        if np.any(np.isnan(log_weights)) or not np.any(np.isfinite(log_weights)):
            raise InvalidInputError("sample weights must be finite or -inf, with at least one finite")
        log_weights.setflags(write=False)
        object.__setattr__(self, 'samples', tuple(self.samples))
        object.__setattr__(self, 'log_weights', log_weights)

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def normalized_log_weights(self) -> np.ndarray:
        return self.log_weights - logsumexp(self.log_weights)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.normalized_log_weights)

    def fitted(self, model: GPModel, workers: int = 1) -> List[Optional[FittedModel]]:
        """Latent fit per sample; failed fits come back as None and are logged."""
        def fit(s: int):
            try:
                return model.fit(self.samples[s])
            except GPLooError as e:
                logger.warning(f"Fit at design point {s} failed: {e}")
                return None

        with self._lock:
            missing = [s for s in range(self.size) if s not in self._fits]
            if missing:
                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        fits = list(pool.map(fit, missing))
                else:
                    fits = [fit(s) for s in missing]
                self._fits.update(zip(missing, fits))
            return [self._fits[s] for s in range(self.size)]


def map_design(hp: HyperParams) -> WeightedSampleSet:
    return WeightedSampleSet((hp,), np.zeros(1), 'map')


def _factorial_corners(p: int) -> np.ndarray:
    """
        Two-level corner points of resolution V or higher.
        Full factorial up to p=4, then the half fraction whose last factor is the product of the others.
    """
    if p == 1:
        return np.empty((0, 1))
    if p <= 4:
        return np.array(list(itertools.product((-1.0, 1.0), repeat=p)))
    base = np.array(list(itertools.product((-1.0, 1.0), repeat=p - 1)))
    return np.column_stack([base, np.prod(base, axis=1)])


def ccd_points(p: int, f0: float = CCD_F0) -> np.ndarray:
    """Standardized CCD points: center, 2p axial at +-sqrt(p) f0, corners at +-f0; all but the center lie on one sphere."""
    axial = np.sqrt(p) * f0 * np.vstack([np.eye(p), -np.eye(p)])
    return np.vstack([np.zeros((1, p)), axial, f0 * _factorial_corners(p)])


def _evaluate(points: np.ndarray, center: HyperParams, scales: CurvatureScales, log_posterior: LogPosterior,
              workers: int) -> Tuple[List[HyperParams], np.ndarray]:
    samples = [center.with_vector(scales.to_params(z)) for z in points]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            densities = np.array(list(pool.map(log_posterior, samples)), dtype=float)
    else:
        densities = np.array([log_posterior(hp) for hp in samples], dtype=float)
    return samples, densities


def _drop_nonfinite(samples: List[HyperParams], log_weights: np.ndarray) -> Tuple[List[HyperParams], np.ndarray]:
    keep = np.isfinite(log_weights)
    for s in np.flatnonzero(~keep):
        logger.warning(f"Dropping design point {s}: log posterior is not finite at {samples[s].as_dict()}")
    if not keep.any():
        raise InvalidInputError("log posterior is not finite at any design point")
    return [hp for hp, k in zip(samples, keep) if k], log_weights[keep]


def ccd_design(center: HyperParams, scales: CurvatureScales, log_posterior: LogPosterior,
               f0: float = CCD_F0, workers: int = 1) -> WeightedSampleSet:
    """
        Central composite design around the posterior mode in the eigen-standardized space.
        Weighting strategy:
            - Every point gets its evaluated log posterior density.
            - Non-center points also get the sphere integration factor
              1 / ((N - 1) (f0^2 - 1) (1 + exp(-p f0^2 / 2))); the center keeps factor 1.
    """
    p = center.size
    if scales.dim != p:
        raise InvalidInputError(f"scales cover {scales.dim} dimensions, hyperparameters have {p}")
    if not f0 > 1:
        raise InvalidInputError(f"CCD scaling f0 must exceed 1, got {f0}")
    points = ccd_points(p, f0)
    n_points = points.shape[0]
    delta = 1.0 / ((n_points - 1) * (f0 ** 2 - 1) * (1 + np.exp(-p * f0 ** 2 / 2)))
    samples, densities = _evaluate(points, center, scales, log_posterior, workers)
    log_weights = densities + np.r_[0.0, np.full(n_points - 1, np.log(delta))]
    samples, log_weights = _drop_nonfinite(samples, log_weights)
    logger.info(f"CCD design: {len(samples)} of {n_points} points in {p} dimensions")
    return WeightedSampleSet(tuple(samples), log_weights, 'ccd')


def grid_design(center: HyperParams, scales: CurvatureScales, log_posterior: LogPosterior,
                points: int = GRID_POINTS, half_width: float = GRID_HALF_WIDTH, workers: int = 1) -> WeightedSampleSet:
    """Tensor grid over +-half_width standardized units, weighted by the log posterior density."""
    if points < 1 or not half_width > 0:
        raise InvalidInputError("grid needs at least one point per dimension and a positive half width")
    p = center.size
    axis = np.linspace(-half_width, half_width, points) if points > 1 else np.zeros(1)
    z = np.array(list(itertools.product(axis, repeat=p)))
    samples, densities = _evaluate(z, center, scales, log_posterior, workers)
    samples, log_weights = _drop_nonfinite(samples, densities)
    logger.info(f"Grid design: {len(samples)} points, {points} per dimension")
    return WeightedSampleSet(tuple(samples), log_weights, 'grid')


def load_sample_file(path: str, template: HyperParams) -> WeightedSampleSet:
    """
        Read externally produced hyperparameter draws.
        One row per sample; columns named like the model's hyperparameters (unconstrained scale)
        plus an optional log_weight column. Without weights every draw counts equally.
    """
    logger.info(f"Reading hyperparameter samples {path}")
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise InvalidInputError(f"sample file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"{path}: malformed CSV ({e})")
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [name for name in template.names if name not in frame.columns]
    if missing:
        raise InvalidInputError(f"{path}: missing hyperparameter columns {missing}")
    unknown = set(frame.columns) - set(template.names) - {LOG_WEIGHT_COLUMN}
    if unknown:
        raise InvalidInputError(f"{path}: unexpected columns {sorted(unknown)}")
    if frame.empty:
        raise InvalidInputError(f"{path}: no samples")
    columns = list(template.names) + ([LOG_WEIGHT_COLUMN] if LOG_WEIGHT_COLUMN in frame.columns else [])
    values = frame[columns].apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(values[:, :template.size]), axis=1))
    if bad.size:
        # header is line 1
        raise InvalidInputError(f"{path}:{bad[0] + 2}: missing or non-numeric hyperparameter value")
    log_weights = np.zeros(len(frame))
    if LOG_WEIGHT_COLUMN in frame.columns:
        log_weights = values[:, -1]
        bad = np.flatnonzero(np.isnan(log_weights))
        if bad.size:
            raise InvalidInputError(f"{path}:{bad[0] + 2}: invalid {LOG_WEIGHT_COLUMN}")
    samples = tuple(template.with_vector(row[:template.size]) for row in values)
    logger.info(f"Loaded {len(samples)} hyperparameter samples from {path}")
    return WeightedSampleSet(samples, log_weights, 'external-sample-file')
