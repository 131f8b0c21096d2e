import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import arviz as az
import numpy as np
from scipy.special import logsumexp

from .design import WeightedSampleSet
from .errors import InvalidInputError
from .report import LooReport

logger = logging.getLogger('importance')

KHAT_WARNING = 0.7
# Smaller sample sets are passed through unsmoothed
MIN_PSIS_SAMPLES = 25
# Sample counts above which k-hat is reported for deterministic designs too
KHAT_SAMPLE_THRESHOLD = 280
_K_MIN = 1.0 / 3
_LOG_TINY = np.log(np.finfo(float).tiny)


@dataclass(frozen=True)
class PsisResult:
    """Smoothed log-weights on the scale of the input, the fitted tail shape and the tail size."""
    log_weights: np.ndarray
    khat: float
    tail_size: int

    @property
    def reliable(self) -> bool:
        return bool(np.isfinite(self.khat) and self.khat <= KHAT_WARNING)


@dataclass(frozen=True)
class WeightDiagnostics:
    """Per-point relative effective sample size of the integrated weights, with k-hat when estimated."""
    relative_ess: np.ndarray
    khat: Optional[np.ndarray]

    @property
    def min_relative_ess(self) -> float:
        values = self.relative_ess[np.isfinite(self.relative_ess)]
        return float(values.min()) if values.size else float('nan')

    @property
    def khat_max(self) -> Optional[float]:
        if self.khat is None:
            return None
        estimated = self.khat[~np.isnan(self.khat)]
        return float(estimated.max()) if estimated.size else None


def effective_sample_size(weights: Sequence[float]) -> float:
    """S_eff = 1 / sum(w^2) for weights normalized to one; lies in [1, S]."""
    w = np.asarray(weights, dtype=float).ravel()
    total = w.sum()
    if w.size == 0 or not total > 0:
        raise InvalidInputError("weights must be non-empty with a positive sum")
    w = w / total
    return float(np.clip(1.0 / np.sum(w ** 2), 1.0, w.size))


def psis_smooth(log_weights: Sequence[float], warn: bool = True) -> PsisResult:
    """
        Pareto-smoothed importance weights, computed by arviz and returned on the scale of the input.
        Smoothing strategy:
            - Tail size M = ceil(min(S/5, 3 sqrt(S))); weights at or below the cutoff keep their values.
            - Tail weights are replaced by the fitted generalized Pareto order statistics when the
              shape is at least 1/3, capped at the raw maximum.
            - Fewer than 25 samples: weights pass through with k-hat = NaN.
    """
    raw = np.asarray(log_weights, dtype=float).ravel()
    if np.any(np.isnan(raw)) or np.any(np.isposinf(raw)):
        raise InvalidInputError("log-weights must not be NaN or +inf")
    S = raw.size
    if S < MIN_PSIS_SAMPLES:
        logger.debug(f"PSIS skipped for {S} samples")
        return PsisResult(raw.copy(), float('nan'), 0)

    x = raw - raw.max()
    tail_size = int(np.ceil(min(S / 5.0, 3 * np.sqrt(S))))
    cutoff = max(np.sort(x)[-tail_size - 1], _LOG_TINY)
    tail = np.flatnonzero(x > cutoff)
    out = raw.copy()
    if tail.size == 0:
        # more than M weights tie at the maximum
        khat = 0.0
    else:
        smoothed, shape = az.psislw(raw[None, :])
        smoothed = np.asarray(smoothed, dtype=float)[0]
        khat = float(np.ravel(shape)[0])
        if khat >= _K_MIN:
            # arviz normalizes; shift back so the body matches the input
            body = np.argmin(x)
            out = smoothed + (raw[body] - smoothed[body])
            out[x <= cutoff] = raw[x <= cutoff]
            out = np.minimum(out, raw.max())
    if warn and not khat <= KHAT_WARNING:
        logger.warning(f"Pareto k-hat {khat:.2f} exceeds {KHAT_WARNING}; importance weights are unreliable")
    return PsisResult(out, khat, int(tail.size))


def integrated_log_weights(samples: WeightedSampleSet, conditional: Sequence[LooReport]) -> np.ndarray:
    """
        Normalized log of the per-point importance weights w_i^s proportional to w^s / p(y_i | D_-i, s),
        shape (n, S). Samples whose conditional estimate failed at a point get -inf there.
    """
    if len(conditional) != samples.size:
        raise InvalidInputError(f"{len(conditional)} conditional reports for {samples.size} samples")
    n = conditional[0].n
    if any(report.n != n for report in conditional):
        raise InvalidInputError("conditional reports cover different numbers of points")
    lpd = np.column_stack([report.lpd for report in conditional])
    raw = np.where(np.isfinite(lpd), samples.normalized_log_weights[None, :] - lpd, -np.inf)
    with np.errstate(invalid='ignore'):
        norm = logsumexp(raw, axis=1, keepdims=True)
    return np.where(np.isfinite(norm), raw - norm, -np.inf)


def hierarchical_loo(samples: WeightedSampleSet, conditional: Sequence[LooReport],
                     smooth: bool = False) -> LooReport:
    """
        Combine conditional LOO reports over hyperparameter samples by integrated importance weighting:
        p(y_i | D_-i) = sum_s w^s / sum_s (w^s / p(y_i | D_-i, s)).
        With `smooth` the per-point integrated weights are Pareto-smoothed first.
    """
    base = conditional[0].method if conditional else ''
    method = f"hierarchical-{base}"
    if samples.size == 1 and len(conditional) == 1:
        return conditional[0].renamed(method)

    ilw = integrated_log_weights(samples, conditional)
    n = ilw.shape[0]
    lpd = np.column_stack([report.lpd for report in conditional])
    warnings: List[str] = []
    if smooth:
        high = 0
        for i in range(n):
            finite = np.isfinite(ilw[i])
            if finite.sum() >= MIN_PSIS_SAMPLES:
                result = psis_smooth(ilw[i, finite], warn=False)
                high += not result.reliable
                row = np.full(samples.size, -np.inf)
                row[finite] = result.log_weights
                ilw[i] = row - logsumexp(row)
        if high:
            warnings.append(f"{method}: Pareto k-hat above {KHAT_WARNING} at {high} points")
            logger.warning(warnings[-1])

    failures = {}
    out = np.full(n, np.nan)
    for i in range(n):
        used = np.isfinite(ilw[i]) & np.isfinite(lpd[i])
        if not used.any():
            failures[i] = 'no sample with positive weight and a valid conditional estimate'
            continue
        out[i] = logsumexp(ilw[i, used] + lpd[i, used])
    if failures:
        logger.warning(f"{method}: {len(failures)} points without usable samples")

    pit = None
    if all(report.pit is not None for report in conditional):
        pits = np.column_stack([report.pit for report in conditional])
        with np.errstate(invalid='ignore'):
            pit = np.nansum(np.exp(ilw) * np.where(np.isfinite(pits), pits, np.nan), axis=1)
    return LooReport(method, out, failures, pit, _mixture_training(samples, conditional), warnings=warnings)


def mixture_loo(samples: WeightedSampleSet, conditional: Sequence[LooReport]) -> LooReport:
    """Unweighted variant: sum_s w^s p(y_i | D_-i, s) with the full-data sample weights."""
    base = conditional[0].method if conditional else ''
    if len(conditional) != samples.size:
        raise InvalidInputError(f"{len(conditional)} conditional reports for {samples.size} samples")
    lpd = np.column_stack([report.lpd for report in conditional])
    lw = samples.normalized_log_weights[None, :]
    terms = np.where(np.isfinite(lpd), lw + lpd, -np.inf)
    with np.errstate(invalid='ignore'):
        out = logsumexp(terms, axis=1)
    failures = {int(i): 'no sample with a valid conditional estimate' for i in np.flatnonzero(~np.isfinite(out))}
    return LooReport(f"hierarchical-mixture-{base}", np.where(np.isfinite(out), out, np.nan), failures,
                     training_lpd=_mixture_training(samples, conditional))


def _mixture_training(samples: WeightedSampleSet, conditional: Sequence[LooReport]) -> Optional[np.ndarray]:
    if any(report.training_lpd is None for report in conditional):
        return None
    train = np.column_stack([report.training_lpd for report in conditional])
    terms = np.where(np.isfinite(train), samples.normalized_log_weights[None, :] + train, -np.inf)
    with np.errstate(invalid='ignore'):
        out = logsumexp(terms, axis=1)
    return np.where(np.isfinite(out), out, np.nan)


def loo_weight_diagnostics(samples: WeightedSampleSet, integrated: np.ndarray,
                           stochastic: Optional[bool] = None) -> WeightDiagnostics:
    """
        Relative effective sample size S_eff / S of each point's integrated weights.
        k-hat is estimated per point when S > 280 or the samples are draws rather than a design.
    """
    integrated = np.atleast_2d(np.asarray(integrated, dtype=float))
    S = samples.size
    if integrated.shape[1] != S:
        raise InvalidInputError(f"integrated weights have {integrated.shape[1]} columns for {S} samples")
    stochastic = samples.source == 'external-sample-file' if stochastic is None else stochastic
    relative = np.full(integrated.shape[0], np.nan)
    for i, row in enumerate(integrated):
        finite = np.isfinite(row)
        if finite.any():
            relative[i] = effective_sample_size(np.exp(row[finite] - row[finite].max())) / S
    khat = None
    if S > KHAT_SAMPLE_THRESHOLD or stochastic:
        khat = np.array([psis_smooth(row[np.isfinite(row)], warn=False).khat if np.isfinite(row).any()
                         else np.nan for row in integrated])
        high = int(np.sum(khat[~np.isnan(khat)] > KHAT_WARNING))
        if high:
            logger.warning(f"Pareto k-hat above {KHAT_WARNING} at {high} points")
    diagnostics = WeightDiagnostics(relative, khat)
    logger.info(f"Minimum relative effective sample size {100 * diagnostics.min_relative_ess:.1f}%")
    return diagnostics
