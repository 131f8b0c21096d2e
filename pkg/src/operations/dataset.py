import logging
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import InvalidInputError

logger = logging.getLogger('dataset')

_X_COLUMN = re.compile(r'^x(\d+)$')


@dataclass(frozen=True)
class Dataset:
    """
        Covariates, outcomes and optional censoring flags of one modelling problem.
        Arrays are copied and frozen on construction so a Dataset can be shared between threads.
    """
    x: np.ndarray
    y: np.ndarray
    censored: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidInputError(f"covariates must be an n x d matrix with n, d >= 1, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise InvalidInputError(f"{y.shape[0]} outcomes for {x.shape[0]} covariate rows")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise InvalidInputError("covariates and outcomes must be finite")
        censored = None
        if self.censored is not None:
            censored = np.array(self.censored, dtype=bool).ravel()
            if censored.shape[0] != y.shape[0]:
                raise InvalidInputError(f"{censored.shape[0]} censoring flags for {y.shape[0]} outcomes")
            censored.setflags(write=False)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'censored', censored)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def without(self, index: int) -> 'Dataset':
        """Return the dataset with observation `index` removed (D minus i)."""
        keep = np.arange(self.n) != index
        censored = None if self.censored is None else self.censored[keep]
        return Dataset(self.x[keep], self.y[keep], censored)

    def subset(self, indices: np.ndarray) -> 'Dataset':
        censored = None if self.censored is None else self.censored[indices]
        return Dataset(self.x[indices], self.y[indices], censored)

    def permuted(self, order: np.ndarray) -> 'Dataset':
        return self.subset(np.asarray(order))

    def validate_for(self, likelihood_kind: str) -> None:
        """Check outcome support against the likelihood that will consume the data."""
        if likelihood_kind == 'probit' and not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidInputError("probit outcomes must be coded as -1/+1")
        if likelihood_kind == 'log-logistic-censored':
            if np.any(self.y <= 0):
                raise InvalidInputError("survival times must be positive")
        elif self.censored is not None:
            raise InvalidInputError("censoring flags are only valid with the censored log-logistic likelihood")


def load_csv(path: str) -> Dataset:
    """
        Read a dataset from CSV.
        Layout:
            - Header row with covariate columns x1..xd, an outcome column y and an optional cens column (0/1).
            - Missing or non-numeric values are rejected with the offending line number.
    """
    logger.info(f"Reading dataset {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InvalidInputError(f"dataset file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"{path}: malformed CSV ({e})")

    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    x_columns = sorted((c for c in columns if _X_COLUMN.match(c)), key=lambda c: int(_X_COLUMN.match(c).group(1)))
    if not x_columns or 'y' not in columns:
        raise InvalidInputError(f"{path}: header must name columns x1..xd and y, got {columns}")
    expected = [f"x{j + 1}" for j in range(len(x_columns))]
    if x_columns != expected:
        raise InvalidInputError(f"{path}: covariate columns must be numbered x1..x{len(x_columns)}, got {x_columns}")
    unknown = set(columns) - set(x_columns) - {'y', 'cens'}
    if unknown:
        raise InvalidInputError(f"{path}: unexpected columns {sorted(unknown)}")
    if frame.empty:
        raise InvalidInputError(f"{path}: no data rows")

    wanted = x_columns + ['y'] + (['cens'] if 'cens' in columns else [])
    values = np.empty((len(frame), len(wanted)))
    for j, column in enumerate(wanted):
        for row, raw in enumerate(frame[column]):
            # header is line 1
            line = row + 2
            text = raw.strip()
            if text == '' or text.lower() in ('na', 'nan'):
                raise InvalidInputError(f"{path}:{line}: missing value in column '{column}'")
            try:
                values[row, j] = float(text)
            except ValueError:
                raise InvalidInputError(f"{path}:{line}: non-numeric value '{text}' in column '{column}'")
            if not np.isfinite(values[row, j]):
                raise InvalidInputError(f"{path}:{line}: non-finite value in column '{column}'")

    d = len(x_columns)
    censored = None
    if 'cens' in columns:
        flags = values[:, d + 1]
        bad = np.flatnonzero(~np.isin(flags, (0.0, 1.0)))
        if bad.size:
            raise InvalidInputError(f"{path}:{bad[0] + 2}: cens must be 0 or 1")
        censored = flags.astype(bool)
    data = Dataset(values[:, :d], values[:, d], censored)
    logger.info(f"Loaded {data.n} rows with {data.d} covariates from {path}")
    return data


def save_csv(data: Dataset, path: str) -> None:
    """Write a dataset in the same layout `load_csv` reads."""
    frame = pd.DataFrame(data.x, columns=[f"x{j + 1}" for j in range(data.d)])
    frame['y'] = data.y
    if data.censored is not None:
        frame['cens'] = data.censored.astype(int)
    frame.to_csv(path, index=False)
