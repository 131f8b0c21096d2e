import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Optional, Tuple

import numpy as np

from .dataset import Dataset
from .ep import ep_fit
from .errors import GPLooError, InvalidInputError
from .hyperparams import HyperParams
from .kernels import build_covariance
from .laplace import laplace_fit
from .likelihoods import likelihood_moments, predictive_cdf
from .loo import Marginals, training_lpd
from .model import GPModel
from .posterior import predict
from .report import LooReport

logger = logging.getLogger('brute_force')

NOT_REQUESTED = 'not requested'


class BruteForceLoo:
    """
        Exact LOO of an approximate inference method by refitting on every D minus i.
        Refit strategy:
            - Builds the full covariance once; fold i uses it with row and column i removed.
            - Fits the latent approximation on the reduced data (Laplace or EP).
            - Predicts the latent value at x_i and integrates the likelihood against it.
        Folds run in a thread pool and results are collected in index order, so the output
        does not depend on the number of workers.
    """

    def __init__(self, model: GPModel, hp: HyperParams, method: Optional[str] = None, workers: int = 1):
        self.model = model if method is None else model.with_method(method)
        self.hp = hp
        self.workers = max(1, int(workers))
        self.kernel, self.likelihood = hp.apply(model.kernel, model.likelihood)
        self.K = build_covariance(model.data.x, self.kernel)
        logger.info(f"Initialized brute-force LOO ({self.model.method}, n={model.data.n}, workers={self.workers})")

    @property
    def data(self) -> Dataset:
        return self.model.data

    def _fold(self, i: int) -> Tuple[float, float, float]:
        """Latent predictive (mean, var) at x_i from the fit on D minus i, then log density of y_i."""
        keep = np.arange(self.data.n) != i
        if not keep.any():
            mean, var = np.zeros(1), np.array([self.K[i, i]])
        else:
            reduced = self.data.without(i)
            K = self.K[np.ix_(keep, keep)]
            if self.model.method == 'laplace':
                state = laplace_fit(reduced, K, self.likelihood, self.model.laplace_config)
            else:
                state = ep_fit(reduced, K, self.likelihood, self.model.ep_config)
            mean, var = predict(K, state.sites, self.K[keep, i][:, None], np.array([self.K[i, i]]))
        censored = None if self.data.censored is None else self.data.censored[i:i + 1]
        lpd = likelihood_moments(self.data.y[i:i + 1], mean, var, self.likelihood, censored,
                                 self.model.ep_config.nodes).log_z0[0]
        pit = np.nan
        if self.likelihood.continuous:
            pit = predictive_cdf(self.data.y[i:i + 1], mean, var, self.likelihood, censored)[0]
        return float(lpd), float(pit), float(var[0])

    def _safe_fold(self, i: int):
        try:
            return self._fold(i)
        except GPLooError as e:
            logger.warning(f"Brute-force fold {i} failed: {e}")
            return e

    def run(self, indices: Optional[Iterable[int]] = None, with_training: bool = True) -> LooReport:
        n = self.data.n
        indices = list(range(n)) if indices is None else sorted({int(i) for i in indices})
        if any(not 0 <= i < n for i in indices):
            raise InvalidInputError(f"fold indices must lie in 0..{n - 1}")
        lpd, pit = np.full(n, np.nan), np.full(n, np.nan)
        failures = {i: NOT_REQUESTED for i in range(n) if i not in set(indices)}

        if self.workers == 1:
            outcomes = [self._safe_fold(i) for i in indices]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                outcomes = list(pool.map(self._safe_fold, indices))
        for i, outcome in zip(indices, outcomes):
            if isinstance(outcome, Exception):
                failures[i] = f"refit failed: {outcome}"
            else:
                lpd[i], pit[i], _ = outcome

        train = None
        if with_training:
            try:
                fitted = self.model.fit(self.hp)
                train = training_lpd(Marginals.from_state(fitted.state, self.data, self.likelihood))
            except GPLooError as e:
                logger.warning(f"Full-data fit for training densities failed: {e}")
        logger.info(f"Brute-force LOO finished: {len(indices)} folds, "
                    f"{sum(1 for r in failures.values() if r != NOT_REQUESTED)} failures")
        return LooReport(f"brute-force-{self.model.method}", lpd, failures,
                         pit if self.likelihood.continuous else None, train)


def brute_force_loo(model: GPModel, hp: HyperParams, method: Optional[str] = None,
                    indices: Optional[Iterable[int]] = None, workers: int = 1) -> LooReport:
    """Refit-based LOO oracle for the Laplace or EP approximation."""
    return BruteForceLoo(model, hp, method, workers).run(indices)


def merge_refits(report: LooReport, refits: LooReport) -> LooReport:
    """Replace failed points of `report` by their brute-force values."""
    lpd = report.lpd.copy()
    failures = dict(report.failures)
    refit = list(report.refit)
    for i in list(failures):
        if np.isfinite(refits.lpd[i]):
            lpd[i] = refits.lpd[i]
            del failures[i]
            refit.append(i)
    pit = None if report.pit is None else report.pit.copy()
    if pit is not None and refits.pit is not None:
        pit[refit] = refits.pit[refit]
    return LooReport(report.method, lpd, failures, pit, report.training_lpd, report.unstable, refit, report.warnings)