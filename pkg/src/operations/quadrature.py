"""
One-dimensional integration against Gaussian references.

Every grid carries weights w_j with sum_j w_j g(x_j) ~ E[g(f)] for f ~ N(center, scale^2),
plus the reference log density at the nodes so that plain integrals of exp(h(f)) df can be
formed as sum_j w_j exp(h(x_j) - log N(x_j)). Gauss-Hermite nodes are the default; a
trapezoid grid over +-6 reference standard deviations is the fallback when the
concentration check trips.

Grids may be batched: `center` and `scale` of shape (n,) give nodes of shape (n, m), and
the integration helpers reduce over the last axis.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import InvalidInputError, NumericalFailureError

logger = logging.getLogger('quadrature')

DEFAULT_NODES = 33
MIN_NODES = 11
MIN_SPAN_SD = 6.0
FALLBACK_POINTS = 2001
FALLBACK_HALF_WIDTH = 6.0
# Share of the total carried by a single node above which a result is flagged
CONCENTRATION_THRESHOLD = 0.9

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class QuadratureGrid:
    nodes: np.ndarray
    weights: np.ndarray
    center: ArrayLike
    scale: ArrayLike
    kind: str = 'gauss-hermite'

    @property
    def m(self) -> int:
        return self.nodes.shape[-1]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    @property
    def log_reference(self) -> np.ndarray:
        center = np.asarray(self.center, dtype=float)[..., None]
        scale = np.asarray(self.scale, dtype=float)[..., None]
        return norm.logpdf(self.nodes, center, scale)


@dataclass(frozen=True)
class QuadratureResult:
    value: ArrayLike
    unstable: ArrayLike
    max_share: ArrayLike
    nonfinite: ArrayLike = 0


@lru_cache(maxsize=32)
def _hermite(m: int) -> Tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.hermite.hermgauss(m)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def _check_reference(mean: np.ndarray, var: np.ndarray) -> None:
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.all(var > 0)):
        raise InvalidInputError("reference Gaussian needs finite means and positive variances")


def adapt_grid(mean: ArrayLike, var: ArrayLike, m: int = DEFAULT_NODES) -> QuadratureGrid:
    """
        Gauss-Hermite nodes recentred and rescaled to N(mean, var).
        With few nodes the rule is built on a stretched reference so that the outermost
        nodes reach +-6 standard deviations; the weights are then importance-corrected and
        renormalized.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    _check_reference(mean, var)
    if m < MIN_NODES or m % 2 == 0:
        raise InvalidInputError(f"node count must be odd and >= {MIN_NODES}, got {m}")
    t, w = _hermite(m)
    sd = np.sqrt(var)
    stretch = max(1.0, MIN_SPAN_SD / (np.sqrt(2.0) * t[-1]))
    nodes = mean[..., None] + np.sqrt(2.0) * stretch * sd[..., None] * t
    weights = w / np.sqrt(np.pi)
    if stretch > 1.0:
        # N(z | 0, 1) / N(z | 0, stretch^2) at the standardized nodes
        z = np.sqrt(2.0) * stretch * t
        weights = weights * stretch * np.exp(-0.5 * z ** 2 * (1.0 - 1.0 / stretch ** 2))
        weights = weights / weights.sum()
    center = float(mean) if mean.ndim == 0 else mean
    scale = float(sd) if sd.ndim == 0 else sd
    return QuadratureGrid(nodes, weights, center, scale, 'gauss-hermite')


def trapezoid_grid(mean: ArrayLike, var: ArrayLike, half_width: float = FALLBACK_HALF_WIDTH,
                   points: int = FALLBACK_POINTS) -> QuadratureGrid:
    """Equally spaced trapezoid rule over mean +- half_width standard deviations."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    _check_reference(mean, var)
    if points < 3:
        raise InvalidInputError("trapezoid grid needs at least 3 points")
    sd = np.sqrt(var)
    u = np.linspace(-half_width, half_width, points)
    nodes = mean[..., None] + sd[..., None] * u
    step = (u[1] - u[0]) * sd[..., None]
    ends = np.ones(points)
    ends[0] = ends[-1] = 0.5
    weights = ends * step * norm.pdf(nodes, mean[..., None], sd[..., None])
    weights = np.maximum(weights, np.finfo(float).tiny)
    center = float(mean) if mean.ndim == 0 else mean
    scale = float(sd) if sd.ndim == 0 else sd
    return QuadratureGrid(nodes, weights, center, scale, 'trapezoid')


def span_grid(lower: ArrayLike, upper: ArrayLike, points: int = FALLBACK_POINTS) -> QuadratureGrid:
    """Trapezoid grid covering [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not np.all(upper > lower):
        raise InvalidInputError("empty integration interval")
    center = 0.5 * (lower + upper)
    sd = (upper - lower) / (2.0 * FALLBACK_HALF_WIDTH)
    return trapezoid_grid(center, sd ** 2, FALLBACK_HALF_WIDTH, points)


def _scalar(result: QuadratureResult) -> QuadratureResult:
    if np.ndim(result.value) == 0:
        return QuadratureResult(float(result.value), bool(result.unstable), float(result.max_share),
                                int(result.nonfinite))
    return result


def integrate(g: Callable[[np.ndarray], np.ndarray], grid: QuadratureGrid) -> QuadratureResult:
    """
        Weighted sum of g over the grid (expectation under the grid's reference Gaussian).
        The result is flagged unstable when one node carries more than 90% of the total or
        when any evaluation is non-finite; non-finite evaluations are left out of the sum.
    """
    values = np.asarray(g(grid.nodes), dtype=float)
    finite = np.isfinite(values)
    if not finite.any(axis=-1).all():
        raise NumericalFailureError("integrand is non-finite at every node",
                                    {'m': grid.m, 'center': np.asarray(grid.center).tolist()})
    contributions = np.where(finite, grid.weights * np.where(finite, values, 0.0), 0.0)
    total = contributions.sum(axis=-1)
    magnitude = np.abs(contributions).sum(axis=-1)
    safe = np.where(magnitude > 0, magnitude, 1.0)
    share = np.where(magnitude > 0, np.abs(contributions).max(axis=-1) / safe, 0.0)
    nonfinite = (~finite).sum(axis=-1)
    unstable = (share > CONCENTRATION_THRESHOLD) | (nonfinite > 0)
    if np.any(unstable):
        logger.debug(f"Unstable integral on {grid.kind} grid: max share {np.max(share):.3f}")
    return _scalar(QuadratureResult(total, unstable, share, nonfinite))


def integrate_log(log_g: Callable[[np.ndarray], np.ndarray], grid: QuadratureGrid,
                  against_reference: bool = True, strict: bool = True) -> QuadratureResult:
    """
        Log of the integral of exp(log_g). With `against_reference` the integral is the
        expectation under the grid's reference Gaussian; otherwise it is a plain integral over f.
        The returned `value` is on the log scale. Rows without a usable node raise unless
        `strict` is off, in which case they come back as NaN and flagged.
    """
    log_values = np.asarray(log_g(grid.nodes), dtype=float)
    if not against_reference:
        log_values = log_values - grid.log_reference
    bad = np.isnan(log_values) | (log_values == np.inf)
    usable = ~bad & (log_values > -np.inf)
    empty = ~usable.any(axis=-1)
    if np.any(empty) and strict:
        raise NumericalFailureError("integrand is zero or non-finite at every node",
                                    {'m': grid.m, 'center': np.asarray(grid.center).tolist()})
    terms = np.where(usable, np.broadcast_to(grid.log_weights, log_values.shape) + np.where(usable, log_values, 0.0),
                     -np.inf)
    with np.errstate(invalid='ignore'):
        log_total = logsumexp(terms, axis=-1)
        share = np.exp(terms.max(axis=-1) - log_total)
    log_total = np.where(empty, np.nan, log_total)
    share = np.where(empty, 1.0, share)
    nonfinite = bad.sum(axis=-1)
    unstable = (share > CONCENTRATION_THRESHOLD) | (nonfinite > 0) | empty
    return _scalar(QuadratureResult(log_total, unstable, share, nonfinite))


def gaussian_fit(derivatives: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]],
                 start: np.ndarray, scale: np.ndarray, max_iter: int = 60,
                 tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
        Vectorized Newton search for the mode of a log integrand, one problem per element.
        `derivatives(f)` returns (value, first, second) elementwise. Returns (mode, variance, ok)
        where variance is -1 / second derivative at the mode and ok marks elements that reached
        a point with negative curvature and a vanishing gradient.
    """
    f = np.array(start, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), f.shape)
    active = np.ones(f.shape, dtype=bool)
    for _ in range(max_iter):
        value, first, second = derivatives(f)
        concave = second < 0
        step = np.where(concave, -first / np.where(concave, second, -1.0), np.sign(first) * scale)
        step = np.clip(step, -5.0 * scale, 5.0 * scale)
        step = np.where(active, step, 0.0)
        new_value = derivatives(f + step)[0]
        # halve steps that do not increase the log integrand
        for _ in range(40):
            worse = active & ~(new_value >= value)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
            new_value = derivatives(f + step)[0]
        f = f + step
        active = active & (np.abs(step) > tol * np.maximum(1.0, np.abs(f)))
        if not active.any():
            break
    _, first, second = derivatives(f)
    concave = (second < 0) & np.isfinite(second)
    var = np.where(concave, -1.0 / np.where(concave, second, -1.0), np.nan)
    ok = concave & (np.abs(first) * np.sqrt(np.where(concave, var, 1.0)) < 1e-6)
    return f, var, ok


# Example usage
if __name__ == "__main__":
    grid = adapt_grid(0.0, 1.0, 21)
    print(f"E[1] = {integrate(np.ones_like, grid).value:.12f}")
    print(f"E[f^2] = {integrate(np.square, grid).value:.12f}")
    print(f"E[exp(f^2)] unstable: {integrate(lambda f: np.exp(f ** 2), grid).unstable}")
