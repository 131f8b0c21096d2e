"""
Leave-one-out predictive densities from a single fitted approximation.

Conditional estimators (LA-LOO, EP-LOO) integrate the likelihood against the approximate
LOO latent marginal. Marginal estimators (Q-LOO, TQ-LOO, WAIC, cumulant series) work from
the per-point posterior marginals, either the Gaussian marginals of the joint approximation
or the locally corrected tilted marginals built from the LOO cavities.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .dataset import Dataset
from .ep import EPState
from .errors import DegenerateModelError, GPLooError, InvalidInputError, NotPositiveDefiniteError
from .laplace import LaplaceState, la_loo_cavities
from .likelihoods import (LOG_2PI, TILTED_POINTS, TILTED_SPAN_SD, LikelihoodSpec, likelihood_moments,
                          predictive_cdf, _loglik)
from .posterior import CavityDistribution, cavities_from
from .quadrature import DEFAULT_NODES, FALLBACK_POINTS, adapt_grid, gaussian_fit, integrate_log, span_grid
from .report import MAX_CUMULANT_ORDER, CumulantSeries, GaussianLooResult, LooReport

logger = logging.getLogger('loo')

MARGINAL_KINDS = ('gaussian', 'local')
# Offsets (in reference standard deviations) checked for growth of the ratio integrand
DIVERGENCE_OFFSETS = (16.0, 32.0)
MAX_TRAPEZOID_POINTS = 20001


@dataclass(frozen=True)
class TruncationConfig:
    c0: float = 1e-4
    half_width: float = 6.0
    # overrides the data-driven truncation level when set
    fixed_c: Optional[float] = None

    def __post_init__(self):
        if not self.c0 > 0:
            raise InvalidInputError("c0 must be positive")
        if not self.half_width >= 1:
            raise InvalidInputError("half-width must be at least one standard deviation")
        if self.fixed_c is not None and not self.fixed_c >= 0:
            raise InvalidInputError("fixed truncation level must be non-negative")


def _col(values: np.ndarray, f: np.ndarray) -> np.ndarray:
    return values[:, None] if f.ndim == 2 else values


@dataclass(frozen=True)
class Marginals:
    """
        Per-point posterior marginals q(f_i).
        gaussian: N(mean_i, var_i).
        local: N(f | mean_i, var_i) p(y_i | f) / Z0_i with (mean, var) the LOO cavity.
        ref_mean and ref_var are the first two moments of q, used to place quadrature grids.
    """
    kind: str
    mean: np.ndarray
    var: np.ndarray
    y: np.ndarray
    spec: LikelihoodSpec
    censored: Optional[np.ndarray] = None
    failed: Optional[np.ndarray] = None
    ref_mean: Optional[np.ndarray] = None
    ref_var: Optional[np.ndarray] = None
    log_z0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MARGINAL_KINDS:
            raise InvalidInputError(f"unknown marginal kind '{self.kind}'")
        failed = np.zeros(np.size(self.mean), dtype=bool) if self.failed is None else np.asarray(self.failed, bool)
        object.__setattr__(self, 'failed', failed)
        if self.ref_mean is None:
            object.__setattr__(self, 'ref_mean', self.mean)
            object.__setattr__(self, 'ref_var', self.var)

    @property
    def n(self) -> int:
        return self.mean.size

    @classmethod
    def gaussian(cls, mean: np.ndarray, var: np.ndarray, data: Dataset, spec: LikelihoodSpec) -> 'Marginals':
        mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
        if not np.all(var > 0):
            raise InvalidInputError("marginal variances must be positive")
        return cls('gaussian', mean, var, data.y, spec, data.censored)

    @classmethod
    def local(cls, cavity: CavityDistribution, data: Dataset, spec: LikelihoodSpec,
              nodes: int = DEFAULT_NODES) -> 'Marginals':
        failed = np.array(cavity.failed, dtype=bool)
        mean = np.where(failed, 0.0, cavity.mean)
        var = np.where(failed, 1.0, cavity.var)
        moments = likelihood_moments(data.y, mean, var, spec, data.censored, nodes)
        return cls('local', mean, var, data.y, spec, data.censored, failed,
                   moments.mean, moments.var, moments.log_z0)

    @classmethod
    def from_state(cls, state, data: Dataset, spec: LikelihoodSpec, kind: str = 'gaussian',
                   nodes: int = DEFAULT_NODES) -> 'Marginals':
        """Gaussian marginals of the joint approximation, or tilted marginals from its LOO cavities."""
        if kind == 'gaussian':
            return cls.gaussian(state.posterior.mean, state.posterior.var, data, spec)
        return cls.local(loo_cavities(state), data, spec, nodes)

    def take(self, index: np.ndarray) -> 'Marginals':
        pick = (lambda a: None if a is None else np.asarray(a)[index])
        return replace(self, mean=self.mean[index], var=self.var[index], y=self.y[index],
                       censored=pick(self.censored), failed=self.failed[index], ref_mean=self.ref_mean[index],
                       ref_var=self.ref_var[index], log_z0=pick(self.log_z0))

    def log_q(self, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """log q(f) with first and second derivatives; f is (n,) or (n, m)."""
        mean, var = _col(self.mean, f), _col(self.var, f)
        value = -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (f - mean) ** 2 / var
        first = -(f - mean) / var
        second = -1.0 / var + np.zeros_like(f)
        if self.kind == 'local':
            cens = None if self.censored is None else _col(self.censored, f)
            ll, ll1, ll2 = _loglik(_col(self.y, f), f, self.spec, cens)
            value, first, second = value + ll - _col(self.log_z0, f), first + ll1, second + ll2
        return value, first, second

    def log_lik(self, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        cens = None if self.censored is None else _col(self.censored, f)
        return _loglik(_col(self.y, f), f, self.spec, cens)


def loo_cavities(state) -> CavityDistribution:
    if isinstance(state, LaplaceState):
        return la_loo_cavities(state)
    if isinstance(state, EPState):
        return state.cavities
    raise InvalidInputError(f"no LOO cavities for {type(state).__name__}")


def _expectation_grid(marginals: Marginals, nodes: int):
    """Grid and normalized per-node log weights for expectations under q."""
    if marginals.kind == 'gaussian':
        grid = adapt_grid(marginals.mean, marginals.var, nodes)
        log_w = np.broadcast_to(grid.log_weights, grid.nodes.shape)
        return grid, log_w
    if marginals.spec.log_concave:
        grid = adapt_grid(marginals.ref_mean, marginals.ref_var, nodes)
    else:
        half = TILTED_SPAN_SD
        lower = np.minimum(marginals.mean - half * np.sqrt(marginals.var),
                           marginals.ref_mean - half * np.sqrt(marginals.ref_var))
        upper = np.maximum(marginals.mean + half * np.sqrt(marginals.var),
                           marginals.ref_mean + half * np.sqrt(marginals.ref_var))
        grid = span_grid(lower, upper, TILTED_POINTS)
    log_w = grid.log_weights + marginals.log_q(grid.nodes)[0] - grid.log_reference
    log_w = log_w - logsumexp(log_w, axis=-1, keepdims=True)
    return grid, log_w


def _valid_points(marginals: Marginals) -> np.ndarray:
    return np.flatnonzero(~marginals.failed)


def training_lpd(marginals: Marginals, nodes: int = DEFAULT_NODES) -> np.ndarray:
    """log of the integral of p(y_i | f) q(f_i) per point (posterior predictive density at y_i)."""
    out = np.full(marginals.n, np.nan)
    idx = _valid_points(marginals)
    if idx.size == 0:
        return out
    m = marginals.take(idx)
    if m.kind == 'gaussian':
        out[idx] = likelihood_moments(m.y, m.mean, m.var, m.spec, m.censored, nodes).log_z0
        return out
    grid, log_w = _expectation_grid(m, nodes)
    out[idx] = logsumexp(log_w + m.log_lik(grid.nodes)[0], axis=-1)
    return out


def gaussian_exact_loo(K: np.ndarray, noise_variance: float, y: np.ndarray) -> GaussianLooResult:
    """
        Closed-form LOO for Gaussian observations: with C = K + s2 I, g = C^-1 y and
        cbar = diag(C^-1), the LOO predictive of y_i is N(y_i - g_i/cbar_i, 1/cbar_i).
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if K.shape != (n, n) or not noise_variance > 0:
        raise InvalidInputError("gaussian LOO needs an n x n covariance and positive noise variance")
    C = K + noise_variance * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("K + noise variance I is not positive definite")
    g = scipy.linalg.cho_solve(factor, y)
    cbar = np.diag(scipy.linalg.cho_solve(factor, np.eye(n)))
    var = 1.0 / cbar - noise_variance
    if np.any(var <= 0):
        raise DegenerateModelError(f"non-positive LOO latent variance at points {np.flatnonzero(var <= 0).tolist()}")
    mean = y - g / cbar
    lpd = -0.5 * LOG_2PI + 0.5 * np.log(cbar) - 0.5 * g ** 2 / cbar
    return GaussianLooResult(mean, var, g, cbar, lpd)


def _conditional_report(method: str, cavity: CavityDistribution, data: Dataset, spec: LikelihoodSpec,
                        log_z0: Optional[np.ndarray], train: np.ndarray, nodes: int) -> LooReport:
    failed = np.array(cavity.failed, dtype=bool)
    failures = {int(i): 'cavity failure' for i in np.flatnonzero(failed)}
    lpd = np.full(data.n, np.nan)
    idx = np.flatnonzero(~failed)
    pit = None
    if idx.size:
        censored = None if data.censored is None else data.censored[idx]
        if log_z0 is None:
            try:
                lpd[idx] = likelihood_moments(data.y[idx], cavity.mean[idx], cavity.var[idx], spec, censored,
                                              nodes).log_z0
            except GPLooError as e:
                logger.error(f"{method}: likelihood quadrature failed: {e}")
                failures.update({int(i): 'quadrature failure' for i in idx})
        else:
            lpd[idx] = log_z0[idx]
        if spec.continuous:
            pit = np.full(data.n, np.nan)
            pit[idx] = predictive_cdf(data.y[idx], cavity.mean[idx], cavity.var[idx], spec, censored)
    if failures:
        logger.warning(f"{method}: {len(failures)} failed points")
    return LooReport(method, lpd, failures, pit, train)


def ep_loo(state: EPState, data: Dataset, spec: LikelihoodSpec, nodes: int = DEFAULT_NODES) -> LooReport:
    """EP-LOO: the tilted zeroth moments of the converged fit, read without recomputation."""
    if not state.converged:
        raise InvalidInputError("EP-LOO needs a converged EP state")
    train = training_lpd(Marginals.from_state(state, data, spec), nodes)
    return _conditional_report('ep-loo', state.cavities, data, spec, state.tilted_log_z0, train, nodes)


def la_loo(state: LaplaceState, data: Dataset, spec: LikelihoodSpec, nodes: int = DEFAULT_NODES,
           route: str = 'linear-response') -> LooReport:
    """
        LA-LOO: likelihood integrated against the Laplace LOO cavity. The cavity is taken from
        the linear-response form or by removing the site from the marginal; both agree.
    """
    if route == 'linear-response':
        cavity = la_loo_cavities(state)
    elif route == 'site-removal':
        cavity = cavities_from(state.posterior, state.sites)
    else:
        raise InvalidInputError(f"unknown LA-LOO route '{route}'")
    train = training_lpd(Marginals.from_state(state, data, spec), nodes)
    return _conditional_report('la-loo', cavity, data, spec, None, train, nodes)


def _ratio_log_integrand(m: Marginals):
    def log_h(f):
        return m.log_q(f)[0] - m.log_lik(f)[0]
    return log_h


def ratio_diverges(marginals: Marginals) -> np.ndarray:
    """
        True where q(f)/p(y|f) grows in either tail, checked at fixed multiples of the
        marginal standard deviation.
    """
    log_h = _ratio_log_integrand(marginals)
    sd = np.sqrt(marginals.ref_var)
    near, far = DIVERGENCE_OFFSETS
    diverges = np.zeros(marginals.n, dtype=bool)
    with np.errstate(all='ignore'):
        for sign in (-1.0, 1.0):
            h_near = log_h(marginals.ref_mean + sign * near * sd)
            h_far = log_h(marginals.ref_mean + sign * far * sd)
            diverges |= ~(h_far < h_near)
    return diverges


def _ratio_reference(m: Marginals) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    def derivatives(f):
        q, q1, q2 = m.log_q(f)
        ll, ll1, ll2 = m.log_lik(f)
        return q - ll, q1 - ll1, q2 - ll2
    with np.errstate(all='ignore'):
        return gaussian_fit(derivatives, m.ref_mean, np.sqrt(m.ref_var))


def _point_count(lower: np.ndarray, upper: np.ndarray, finest_sd: np.ndarray) -> int:
    needed = int(np.max(np.ceil((upper - lower) / (finest_sd / 40.0)))) + 1
    points = int(np.clip(needed, FALLBACK_POINTS, MAX_TRAPEZOID_POINTS))
    return points if points % 2 else points + 1


def q_loo(marginals: Marginals, nodes: int = DEFAULT_NODES) -> LooReport:
    """
        Q-LOO: lpd_i = -log of the integral of q(f)/p(y_i|f).
        Convergent points use Gauss-Hermite on a Gaussian fitted to the ratio integrand; divergent
        ratios are integrated on a +-6 sd trapezoid and reported as unstable.
    """
    method = f"q-loo:{marginals.kind}"
    lpd = np.full(marginals.n, np.nan)
    failures = {int(i): 'cavity failure' for i in np.flatnonzero(marginals.failed)}
    unstable = np.zeros(marginals.n, dtype=bool)
    idx = _valid_points(marginals)
    if idx.size:
        m = marginals.take(idx)
        diverges = ratio_diverges(m)
        mode, var, ok = _ratio_reference(m)
        ok &= ~diverges
        value = np.full(idx.size, np.nan)
        flag = diverges.copy()

        good = np.flatnonzero(ok)
        if good.size:
            sub = m.take(good)
            result = integrate_log(_ratio_log_integrand(sub), adapt_grid(mode[good], var[good], nodes),
                                   against_reference=False, strict=False)
            value[good] = np.atleast_1d(result.value)
            flag[good] |= np.atleast_1d(result.unstable)

        redo = np.flatnonzero(~ok | (ok & flag) | ~np.isfinite(value))
        if redo.size:
            sub = m.take(redo)
            sd = np.sqrt(sub.ref_var)
            lower, upper = sub.ref_mean - 6.0 * sd, sub.ref_mean + 6.0 * sd
            fitted = ok[redo] & np.isfinite(var[redo])
            sd_h = np.where(fitted, np.sqrt(np.where(fitted, var[redo], 1.0)), sd)
            lower = np.where(fitted, np.minimum(lower, mode[redo] - 6.0 * sd_h), lower)
            upper = np.where(fitted, np.maximum(upper, mode[redo] + 6.0 * sd_h), upper)
            grid = span_grid(lower, upper, _point_count(lower, upper, np.minimum(sd, sd_h)))
            result = integrate_log(_ratio_log_integrand(sub), grid, against_reference=False, strict=False)
            value[redo] = np.atleast_1d(result.value)
            flag[redo] = diverges[redo] | np.atleast_1d(result.unstable)

        lpd[idx] = -value
        unstable[idx] = flag
        for j in np.flatnonzero(~np.isfinite(value)):
            failures[int(idx[j])] = 'ratio integral failed'
    if unstable.any():
        logger.warning(f"{method}: {int(unstable.sum())} points with divergent or unstable ratio integrals")
    train = training_lpd(marginals, nodes)
    return LooReport(method, lpd, failures, None, train, np.flatnonzero(unstable).tolist())


def tq_loo(marginals: Marginals, config: TruncationConfig = TruncationConfig(),
           nodes: int = DEFAULT_NODES) -> LooReport:
    """
        Truncated-weights quadrature LOO.
        lpd_i = log [ integral of p q w / integral of q w ] with w(f) = 1 / max(p(y_i|f), c_i)
        and c_i = c0 / (integral of q/p over the marginal mean +- half_width sd).
    """
    method = f"tq-loo:{marginals.kind}"
    lpd = np.full(marginals.n, np.nan)
    failures = {int(i): 'cavity failure' for i in np.flatnonzero(marginals.failed)}
    idx = _valid_points(marginals)
    if idx.size:
        m = marginals.take(idx)
        sd = np.sqrt(m.ref_var)
        mode, var, ok = _ratio_reference(m)
        ok &= np.isfinite(var)
        sd_h = np.where(ok, np.sqrt(np.where(ok, var, 1.0)), sd)
        center_h = np.where(ok, mode, m.ref_mean)
        a, b = m.ref_mean - config.half_width * sd, m.ref_mean + config.half_width * sd
        lower = np.minimum(a, center_h - config.half_width * sd_h)
        upper = np.maximum(b, center_h + config.half_width * sd_h)
        grid = span_grid(lower, upper, _point_count(lower, upper, np.minimum(sd, sd_h)))

        with np.errstate(all='ignore'):
            log_step = grid.log_weights - grid.log_reference
            log_q = m.log_q(grid.nodes)[0]
            log_p = m.log_lik(grid.nodes)[0]
            inside = (grid.nodes >= a[:, None]) & (grid.nodes <= b[:, None])
            if config.fixed_c is None:
                log_ratio_mass = logsumexp(np.where(inside, log_step + log_q - log_p, -np.inf), axis=-1)
                log_c = np.log(config.c0) - log_ratio_mass
            else:
                log_c = np.full(idx.size, np.log(config.fixed_c) if config.fixed_c > 0 else -np.inf)
            log_cap = np.maximum(log_p, log_c[:, None])
            numerator = logsumexp(log_step + log_q + log_p - log_cap, axis=-1)
            denominator = logsumexp(log_step + log_q - log_cap, axis=-1)
        value = numerator - denominator
        lpd[idx] = value
        for j in np.flatnonzero(~np.isfinite(value)):
            failures[int(idx[j])] = 'truncated quadrature failed'
    train = training_lpd(marginals, nodes)
    return LooReport(method, lpd, failures, None, train)


def log_predictive_moments(marginals: Marginals, order: int, nodes: int = DEFAULT_NODES
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """
        Cumulants kappa_1..kappa_order of log p(y_i|f) under q(f_i) and log E_q[p(y_i|f)].
        Rows of failed points are NaN.
    """
    if not 1 <= order <= MAX_CUMULANT_ORDER:
        raise InvalidInputError(f"cumulant order must lie in 1..{MAX_CUMULANT_ORDER}, got {order}")
    cumulants = np.full((marginals.n, order), np.nan)
    log_mean = np.full(marginals.n, np.nan)
    idx = _valid_points(marginals)
    if idx.size == 0:
        return cumulants, log_mean
    m = marginals.take(idx)
    grid, log_w = _expectation_grid(m, nodes)
    w = np.exp(log_w)
    log_p = m.log_lik(grid.nodes)[0]
    log_mean[idx] = logsumexp(log_w + log_p, axis=-1)
    mu1 = np.sum(w * log_p, axis=-1)
    centered = log_p - mu1[:, None]
    mu = {j: np.sum(w * centered ** j, axis=-1) for j in range(2, 7)}
    kappa = [
        mu1,
        mu[2],
        mu[3],
        mu[4] - 3 * mu[2] ** 2,
        mu[5] - 10 * mu[3] * mu[2],
        mu[6] - 15 * mu[4] * mu[2] - 10 * mu[3] ** 2 + 30 * mu[2] ** 3,
    ]
    cumulants[idx] = np.column_stack(kappa[:order])
    return cumulants, log_mean


def waic(marginals: Marginals, variant: str = 'V', nodes: int = DEFAULT_NODES) -> LooReport:
    """
        Per-point WAIC on the log-density scale.
        G: 2 E[log p] - log E[p]. V: log E[p] - Var[log p].
    """
    variant = variant.upper()
    if variant not in ('G', 'V'):
        raise InvalidInputError(f"WAIC variant must be G or V, got '{variant}'")
    cumulants, log_mean = log_predictive_moments(marginals, 2, nodes)
    if variant == 'G':
        lpd = 2 * cumulants[:, 0] - log_mean
    else:
        lpd = log_mean - cumulants[:, 1]
    failures = {int(i): 'cavity failure' for i in np.flatnonzero(marginals.failed)}
    return LooReport(f"waic-{variant.lower()}:{marginals.kind}", lpd, failures, None, log_mean)


def cumulant_series_loo(marginals: Marginals, k: int, nodes: int = DEFAULT_NODES
                        ) -> Tuple[CumulantSeries, LooReport]:
    """
        LOO from the first k terms of the alternating series in the cumulants of log p.
        Orders above six are refused: the high moments are dominated by quadrature noise.
    """
    if k > MAX_CUMULANT_ORDER:
        raise InvalidInputError(f"cumulant series order {k} exceeds {MAX_CUMULANT_ORDER}; "
                                f"use q-loo or tq-loo for a full-series estimate")
    if k < 1:
        raise InvalidInputError("cumulant series order must be at least 1")
    cumulants, log_mean = log_predictive_moments(marginals, k, nodes)
    series = CumulantSeries(cumulants, log_mean)
    failures = {int(i): 'cavity failure' for i in np.flatnonzero(marginals.failed)}
    report = LooReport(f"cumulant-{k}:{marginals.kind}", series.partial_sum(k), failures, None, log_mean)
    return series, report
