import logging
import os
from typing import Callable, Dict, Optional

import numpy as np

from .dataset import Dataset, load_csv
from .errors import InvalidInputError

logger = logging.getLogger('registry')

RIPLEY_N = 250
# (class label, component mean); every component has isotropic variance RIPLEY_VARIANCE
RIPLEY_COMPONENTS = (
    (-1.0, (-0.7, 0.3)),
    (-1.0, (0.3, 0.3)),
    (1.0, (-0.3, 0.7)),
    (1.0, (0.4, 0.7)),
)
RIPLEY_VARIANCE = 0.03


def _latent(x: np.ndarray) -> np.ndarray:
    """Smooth test function shared by the synthetic generators."""
    return np.sum(np.sin(1.5 * x) + 0.25 * x, axis=1)


def _covariates(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=(n, d))


def ripley(n: int = RIPLEY_N, d: int = 2, seed: int = 0) -> Dataset:
    """Two-class mixture of four Gaussian components in the plane; labels -1/+1."""
    if d != 2:
        raise InvalidInputError("the ripley data has exactly two covariates")
    rng = np.random.default_rng(seed)
    component = rng.integers(len(RIPLEY_COMPONENTS), size=n)
    means = np.array([mean for _, mean in RIPLEY_COMPONENTS])
    labels = np.array([label for label, _ in RIPLEY_COMPONENTS])
    x = means[component] + np.sqrt(RIPLEY_VARIANCE) * rng.standard_normal((n, 2))
    return Dataset(x, labels[component])


def regression(n: int = 50, d: int = 1, seed: int = 0, noise_variance: float = 0.5) -> Dataset:
    rng = np.random.default_rng(seed)
    x = _covariates(rng, n, d)
    return Dataset(x, _latent(x) + np.sqrt(noise_variance) * rng.standard_normal(n))


def classification(n: int = 100, d: int = 1, seed: int = 0) -> Dataset:
    """Probit labels: y = sign(f(x) + e) with standard normal e."""
    rng = np.random.default_rng(seed)
    x = _covariates(rng, n, d)
    y = np.where(_latent(x) + rng.standard_normal(n) > 0, 1.0, -1.0)
    return Dataset(x, y)


def student_t(n: int = 60, d: int = 1, seed: int = 0, nu: float = 4.0, scale: float = 0.3,
              outliers: float = 0.05) -> Dataset:
    """Regression with t-distributed noise and a fraction of gross outliers."""
    rng = np.random.default_rng(seed)
    x = _covariates(rng, n, d)
    y = _latent(x) + scale * rng.standard_t(nu, size=n)
    hit = rng.random(n) < outliers
    y[hit] += rng.choice((-1.0, 1.0), size=hit.sum()) * rng.uniform(3.0, 5.0, size=hit.sum())
    return Dataset(x, y)


def survival(n: int = 100, d: int = 1, seed: int = 0, shape: float = 2.0, censoring: float = 0.2) -> Dataset:
    """
        Log-logistic event times with log T = f(x) + e / shape, e standard logistic.
        Censoring times are drawn so that roughly `censoring` of the points end censored.
    """
    rng = np.random.default_rng(seed)
    x = _covariates(rng, n, d)
    log_t = _latent(x) + rng.logistic(size=n) / shape
    if censoring <= 0:
        return Dataset(x, np.exp(log_t), np.zeros(n, dtype=bool))
    log_c = np.quantile(log_t, 1 - censoring) + rng.logistic(size=n) / shape
    censored = log_c < log_t
    return Dataset(x, np.exp(np.minimum(log_t, log_c)), censored)


GENERATORS: Dict[str, Callable[..., Dataset]] = {
    'ripley': ripley,
    'regression': regression,
    'classification': classification,
    'student-t': student_t,
    'survival': survival,
}


def load_dataset(source: str, n: Optional[int] = None, d: Optional[int] = None, seed: int = 0) -> Dataset:
    """
        Resolve a dataset reference.
        Lookup strategy:
            - A registry name generates synthetic data from `seed` (sizes default per generator).
            - Anything else is read as a CSV path.
    """
    if source in GENERATORS:
        kwargs = {'seed': seed}
        if n is not None:
            kwargs['n'] = int(n)
        if d is not None:
            kwargs['d'] = int(d)
        data = GENERATORS[source](**kwargs)
        logger.info(f"Generated '{source}' data: n={data.n}, d={data.d}, seed={seed}")
        return data
    if not os.path.exists(source):
        raise InvalidInputError(f"'{source}' is neither a registry name {sorted(GENERATORS)} nor an existing file")
    return load_csv(source)


# Example usage
if __name__ == "__main__":
    data = load_dataset('ripley', seed=1)
    print(f"n={data.n}, positives={int(np.sum(data.y > 0))}")
