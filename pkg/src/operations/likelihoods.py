"""
Observation models p(y_i | f_i, phi).

Supported kinds:
    - gaussian: N(y | f, sigma^2), parameter log sigma^2.
    - probit: Phi(y f) with y coded -1/+1, no parameters.
    - student-t: location f, parameter log scale, degrees of freedom fixed at construction.
    - log-logistic-censored: log T is logistic with location f and scale 1/r, parameter log r.
      Censored points contribute the survival function 1 / (1 + (y e^-f)^r).

All functions are vectorized over data points.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, gammaln
from scipy.stats import norm, t as student_t

from .errors import InvalidInputError, NumericalFailureError, UnsupportedOperationError
from .quadrature import DEFAULT_NODES, adapt_grid, gaussian_fit, span_grid, trapezoid_grid, integrate, integrate_log

logger = logging.getLogger('likelihoods')

LIKELIHOOD_KINDS = ('gaussian', 'probit', 'student-t', 'log-logistic-censored')

_PARAM_NAMES = {
    'gaussian': ('lik.log_noise_variance',),
    'probit': (),
    'student-t': ('lik.log_scale',),
    'log-logistic-censored': ('lik.log_shape',),
}

# Span (in standard deviations) and resolution of the trapezoid rule used for tilted
# moments of likelihoods that are not log-concave
TILTED_SPAN_SD = 8.0
TILTED_POINTS = 4001
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str
    log_params: Tuple[float, ...] = ()
    nu: float = 4.0

    def __post_init__(self):
        if self.kind not in LIKELIHOOD_KINDS:
            raise InvalidInputError(f"unknown likelihood '{self.kind}', expected one of {LIKELIHOOD_KINDS}")
        params = tuple(float(v) for v in np.atleast_1d(np.asarray(self.log_params, dtype=float)))
        expected = len(_PARAM_NAMES[self.kind])
        if not params and expected:
            params = (0.0,) * expected
        if len(params) != expected:
            raise InvalidInputError(f"{self.kind} likelihood takes {expected} parameters, got {len(params)}")
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("likelihood parameters must be finite")
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise InvalidInputError(f"degrees of freedom must be positive, got {self.nu}")
        object.__setattr__(self, 'log_params', params)
        object.__setattr__(self, 'nu', float(self.nu))

    @property
    def n_params(self) -> int:
        return len(self.log_params)

    @property
    def log_concave(self) -> bool:
        return self.kind != 'student-t'

    @property
    def continuous(self) -> bool:
        return self.kind != 'probit'

    def params(self) -> np.ndarray:
        return np.array(self.log_params, dtype=float)

    def with_params(self, values: Sequence[float]) -> 'LikelihoodSpec':
        return replace(self, log_params=tuple(float(v) for v in values))

    def param_names(self) -> List[str]:
        return list(_PARAM_NAMES[self.kind])


@dataclass(frozen=True)
class TiltedMoments:
    """Zeroth moment (log scale), mean and variance of cavity times likelihood, per point."""
    log_z0: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    unstable: np.ndarray


def gaussian_spec(noise_variance: float) -> LikelihoodSpec:
    return LikelihoodSpec('gaussian', (np.log(noise_variance),))


def check_support(y: np.ndarray, spec: LikelihoodSpec) -> None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("outcomes must be finite")
    if spec.kind == 'probit' and not np.all(np.isin(y, (-1.0, 1.0))):
        raise InvalidInputError("probit outcomes must be -1 or +1")
    if spec.kind == 'log-logistic-censored' and np.any(y <= 0):
        raise InvalidInputError("log-logistic outcomes must be positive")


def _censor_mask(y: np.ndarray, censored: Optional[np.ndarray]) -> np.ndarray:
    if censored is None:
        return np.zeros(np.shape(y), dtype=bool)
    return np.broadcast_to(np.asarray(censored, dtype=bool), np.shape(y))


def _loglik(y: np.ndarray, f: np.ndarray, spec: LikelihoodSpec,
            censored: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    y, f = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(f, dtype=float))
    if spec.kind == 'gaussian':
        s2 = np.exp(spec.log_params[0])
        r = y - f
        return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * r ** 2 / s2, r / s2, np.full(r.shape, -1.0 / s2)
    if spec.kind == 'probit':
        z = y * f
        log_cdf = norm.logcdf(z)
        ratio = np.exp(norm.logpdf(z) - log_cdf)
        return log_cdf, y * ratio, -ratio * (z + ratio)
    if spec.kind == 'student-t':
        nu = spec.nu
        s2 = np.exp(2 * spec.log_params[0])
        r = y - f
        denom = nu * s2 + r ** 2
        value = (gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi * s2)
                 - 0.5 * (nu + 1) * np.log1p(r ** 2 / (nu * s2)))
        return value, (nu + 1) * r / denom, (nu + 1) * (r ** 2 - nu * s2) / denom ** 2
    # log-logistic with censoring
    shape = np.exp(spec.log_params[0])
    z = shape * (np.log(y) - f)
    s = expit(z)
    cens = _censor_mask(y, censored)
    event = np.log(shape) - np.log(y) + z - 2 * np.logaddexp(0.0, z)
    value = np.where(cens, -np.logaddexp(0.0, z), event)
    first = np.where(cens, shape * s, -shape * (1 - 2 * s))
    second = np.where(cens, -shape ** 2 * s * (1 - s), -2 * shape ** 2 * s * (1 - s))
    return value, first, second


def loglik(y, f, spec: LikelihoodSpec, censored: Optional[np.ndarray] = None
           ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
        Log likelihood and its first and second derivatives with respect to f.
        Inputs broadcast against each other; censoring flags apply to the log-logistic model only.
    """
    check_support(y, spec)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("latent values must be finite")
    return _loglik(y, f, spec, censored)


def log_density(y, f, spec: LikelihoodSpec, censored: Optional[np.ndarray] = None) -> np.ndarray:
    """log p(y | f) without derivatives; f may carry trailing quadrature axes."""
    return _loglik(y, f, spec, censored)[0]


def _closed_form_moments(y: np.ndarray, mu: np.ndarray, v: np.ndarray, spec: LikelihoodSpec) -> TiltedMoments:
    if spec.kind == 'gaussian':
        s2 = np.exp(spec.log_params[0])
        total = v + s2
        log_z0 = -0.5 * (LOG_2PI + np.log(total)) - 0.5 * (y - mu) ** 2 / total
        mean = mu + v * (y - mu) / total
        var = v - v ** 2 / total
    else:
        root = np.sqrt(1.0 + v)
        z = y * mu / root
        log_z0 = norm.logcdf(z)
        ratio = np.exp(norm.logpdf(z) - log_z0)
        mean = mu + y * v * ratio / root
        var = v - v ** 2 * ratio * (z + ratio) / (1.0 + v)
    return TiltedMoments(log_z0, mean, var, np.zeros(np.shape(log_z0), dtype=bool))


def _moments_on_grid(log_h, grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    result = integrate_log(log_h, grid, against_reference=False, strict=False)
    log_z0 = np.atleast_1d(result.value)
    with np.errstate(invalid='ignore', over='ignore'):
        log_p = grid.log_weights + log_h(grid.nodes) - grid.log_reference - log_z0[:, None]
        p = np.where(np.isfinite(log_p), np.exp(log_p), 0.0)
        mean = np.sum(p * grid.nodes, axis=-1)
        var = np.sum(p * (grid.nodes - mean[:, None]) ** 2, axis=-1)
    return log_z0, mean, var, np.atleast_1d(result.unstable)


def likelihood_moments(y, mu, v, spec: LikelihoodSpec, censored: Optional[np.ndarray] = None,
                       nodes: int = DEFAULT_NODES) -> TiltedMoments:
    """
        Moments of the tilted density p(y_i | f) N(f | mu_i, v_i).
        Strategy:
            - gaussian and probit: closed form.
            - log-concave otherwise: Gauss-Hermite on the Laplace reference of the tilted density.
            - student-t: trapezoid over the union of the cavity and tilted-mode spans, since
              the tilted density may be skewed or bimodal.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu, v = np.broadcast_arrays(np.atleast_1d(np.asarray(mu, dtype=float)), np.atleast_1d(np.asarray(v, dtype=float)))
    y = np.broadcast_to(y, mu.shape)
    check_support(y, spec)
    if not (np.all(np.isfinite(mu)) and np.all(v > 0) and np.all(np.isfinite(v))):
        raise InvalidInputError("cavity needs finite means and positive variances")
    if spec.kind in ('gaussian', 'probit'):
        return _closed_form_moments(y, mu, v, spec)

    cens = None if censored is None else np.broadcast_to(np.asarray(censored, dtype=bool), mu.shape)

    def derivatives(f):
        value, first, second = _loglik(y, f, spec, cens)
        return value - 0.5 * (f - mu) ** 2 / v, first - (f - mu) / v, second - 1.0 / v

    def log_h(f):
        c = None if cens is None else cens[:, None]
        return (_loglik(y[:, None], f, spec, c)[0]
                - 0.5 * (LOG_2PI + np.log(v[:, None])) - 0.5 * (f - mu[:, None]) ** 2 / v[:, None])

    mode, mode_var, ok = gaussian_fit(derivatives, mu, np.sqrt(v))
    center = np.where(ok, mode, mu)
    spread = np.where(ok, mode_var, v)

    if spec.log_concave:
        grid = adapt_grid(center, spread, nodes)
    else:
        half = TILTED_SPAN_SD
        lower = np.minimum(mu - half * np.sqrt(v), center - half * np.sqrt(spread))
        upper = np.maximum(mu + half * np.sqrt(v), center + half * np.sqrt(spread))
        grid = span_grid(lower, upper, TILTED_POINTS)
    log_z0, mean, var, unstable = _moments_on_grid(log_h, grid)

    if spec.log_concave and np.any(unstable | ~ok):
        # under-resolved points get the wide trapezoid rule
        redo = np.flatnonzero(unstable | ~ok | ~np.isfinite(log_z0))
        logger.debug(f"Tilted moments: {redo.size} points re-integrated on a trapezoid grid")
        wide = span_grid(np.minimum(mu - TILTED_SPAN_SD * np.sqrt(v), center - TILTED_SPAN_SD * np.sqrt(spread)),
                         np.maximum(mu + TILTED_SPAN_SD * np.sqrt(v), center + TILTED_SPAN_SD * np.sqrt(spread)),
                         TILTED_POINTS)
        w_z0, w_mean, w_var, w_unstable = _moments_on_grid(log_h, wide)
        log_z0[redo], mean[redo], var[redo], unstable[redo] = w_z0[redo], w_mean[redo], w_var[redo], w_unstable[redo]

    if not np.all(np.isfinite(log_z0)) or not np.all(var > 0):
        bad = np.flatnonzero(~np.isfinite(log_z0) | ~(var > 0))
        logger.error(f"Tilted moments failed at {bad.size} points")
        raise NumericalFailureError("tilted moment quadrature failed",
                                    {'points': bad.tolist(), 'mu': mu[bad].tolist(), 'v': v[bad].tolist()})
    return TiltedMoments(log_z0, mean, var, unstable)


def predictive_cdf(y, mu, v, spec: LikelihoodSpec, censored: Optional[np.ndarray] = None) -> np.ndarray:
    """
        P(y' <= y) under the predictive obtained by integrating the observation model against
        N(f | mu, v). Undefined for the binary probit model.
    """
    if not spec.continuous:
        raise UnsupportedOperationError("predictive CDF is not defined for the probit likelihood")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu, v = np.broadcast_arrays(np.atleast_1d(np.asarray(mu, dtype=float)), np.atleast_1d(np.asarray(v, dtype=float)))
    y = np.broadcast_to(y, mu.shape)
    if not (np.all(np.isfinite(mu)) and np.all(v > 0)):
        raise InvalidInputError("predictive marginal needs finite means and positive variances")
    if spec.kind == 'gaussian':
        return norm.cdf(y, mu, np.sqrt(v + np.exp(spec.log_params[0])))

    grid = trapezoid_grid(mu, v)
    if spec.kind == 'student-t':
        scale = np.exp(spec.log_params[0])
        result = integrate(lambda f: student_t.cdf((y[:, None] - f) / scale, spec.nu), grid)
    else:
        if np.any(y[np.isfinite(y)] <= 0):
            raise InvalidInputError("log-logistic outcomes must be positive")
        shape = np.exp(spec.log_params[0])
        with np.errstate(divide='ignore'):
            log_y = np.log(y)
        result = integrate(lambda f: expit(shape * (log_y[:, None] - f)), grid)
    # trapezoid weights cover all but ~2e-9 of the reference mass
    return np.clip(np.atleast_1d(result.value) / grid.weights.sum(axis=-1), 0.0, 1.0)


def log_training_density(y, mu, v, spec: LikelihoodSpec, censored: Optional[np.ndarray] = None,
                         nodes: int = DEFAULT_NODES) -> np.ndarray:
    """log of the integral of p(y_i | f) N(f | mu_i, v_i); the zeroth tilted moment."""
    return likelihood_moments(y, mu, v, spec, censored, nodes).log_z0


# Example usage
if __name__ == "__main__":
    spec = LikelihoodSpec('student-t', (np.log(0.5),))
    moments = likelihood_moments(0.0, 3.0, 0.5, spec)
    print(f"log Z0 = {moments.log_z0[0]:.10f}, mean = {moments.mean[0]:.6f}, var = {moments.var[0]:.6f}")
    print(f"probit log Z0 at N(0,1): {likelihood_moments(1.0, 0.0, 1.0, LikelihoodSpec('probit')).log_z0[0]:.6f}")
