import logging
from typing import List, Optional

import numpy as np

from .errors import InvalidInputError
from .report import ComparisonStats, LooReport

logger = logging.getLogger('assessment')

# Relative effective number of parameters above which marginal-based estimators become unreliable
P_EFF_WARNING = 0.05
P_EFF_NOTE = 0.02
# Per-point effective number of parameters flagged as hard to estimate
P_EFF_POINT_WARNING = 0.2
# Methods that refit or remove the site exactly are exempt from the flexibility rule
EXEMPT_PREFIXES = ('la-loo', 'ep-loo', 'brute-force', 'gaussian-exact', 'hierarchical')


def compare(reference: LooReport, candidate: LooReport, literal_sum: bool = False) -> ComparisonStats:
    """
        Bias and spread of candidate minus reference over the points both estimated.
        bias = sum of deltas; std^2 = sum of (delta_i - bias/n)^2, or (delta_i - bias)^2 with `literal_sum`.
    """
    if reference.n != candidate.n:
        raise InvalidInputError(f"reports cover {reference.n} and {candidate.n} points")
    both = reference.valid & candidate.valid
    if not both.any():
        raise InvalidInputError(f"no point is valid in both {reference.method} and {candidate.method}")
    deltas = np.where(both, candidate.lpd - reference.lpd, np.nan)
    used = deltas[both]
    bias = float(np.sum(used))
    center = bias if literal_sum else bias / used.size
    std = float(np.sqrt(np.sum((used - center) ** 2)))
    excluded = np.flatnonzero(~both).tolist()
    if excluded:
        logger.debug(f"compare {candidate.method}: {len(excluded)} points excluded")
    return ComparisonStats(candidate.method, reference.method, bias, std, deltas, excluded)


def diagnostics(report: LooReport, training_lpd: Optional[np.ndarray] = None) -> List[str]:
    """
        Flexibility checks from the effective number of parameters p_eff = sum(training lpd - LOO lpd).
        Rules:
            - p_eff/n > 0.05: reliability warning for estimators other than LA-LOO and EP-LOO.
            - p_eff/n > 0.02: informational note.
            - p_eff_i > 0.2: per-point warning.
    """
    train = report.training_lpd if training_lpd is None else np.asarray(training_lpd, dtype=float)
    if train is None:
        return []
    if train.shape != report.lpd.shape:
        raise InvalidInputError("training densities and LOO densities differ in length")
    valid = report.valid & np.isfinite(train)
    if not valid.any():
        return []
    points = (train - report.lpd)[valid]
    p_eff = float(np.sum(points))
    ratio = p_eff / points.size
    messages = []
    exempt = report.method.startswith(EXEMPT_PREFIXES)
    if p_eff < 0:
        messages.append(f"{report.method}: negative effective number of parameters ({p_eff:.3f})")
    if ratio > P_EFF_WARNING and not exempt:
        messages.append(f"{report.method}: p_eff/n = {ratio:.3f} exceeds {P_EFF_WARNING}; "
                        f"this estimator is likely biased, prefer la-loo or ep-loo")
    elif ratio > P_EFF_NOTE:
        messages.append(f"note: p_eff/n = {ratio:.3f} exceeds {P_EFF_NOTE}; the model is flexible")
    flagged = np.flatnonzero(valid)[points > P_EFF_POINT_WARNING]
    if flagged.size:
        messages.append(f"{report.method}: {flagged.size} points with p_eff_i > {P_EFF_POINT_WARNING} "
                        f"(first: {flagged[:5].tolist()})")
    for message in messages:
        if message.startswith('note'):
            logger.info(message)
        else:
            logger.warning(message)
    return messages
