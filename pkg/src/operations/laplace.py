import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.linalg

from .dataset import Dataset
from .errors import CavityFailureError, InvalidInputError, NonConvergenceError
from .likelihoods import LikelihoodSpec, loglik
from .posterior import CavityDistribution, GaussianPosterior, SiteParams, site_covariance

logger = logging.getLogger('laplace')

# |W_i| below this is treated as a missing site
NO_SITE_CURVATURE = 1e-12


@dataclass(frozen=True)
class LaplaceConfig:
    max_iter: int = 100
    tol: float = 1e-8
    max_backtracks: int = 30
    # accepted gradient norm when the line search stalls at machine precision
    stall_tol: float = 1e-5


@dataclass(frozen=True)
class LaplaceState:
    """
        Fitted Laplace approximation.
        mode: f_hat; grad: d log p(y|f)/df at the mode; hess: W = -d2 log p(y|f)/df2 (1/site variance).
        flags: per point, 'negative-site' or 'no-site' where the curvature is not positive.
    """
    mode: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    posterior: GaussianPosterior
    sites: SiteParams
    alpha: np.ndarray
    iterations: int
    flags: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.mode.size


def _objective(a: np.ndarray, K: np.ndarray, y: np.ndarray, spec: LikelihoodSpec, censored) -> tuple:
    f = K @ a
    value, first, second = loglik(y, f, spec, censored)
    return float(np.sum(value) - 0.5 * a @ f), f, value, first, second


def laplace_fit(data: Dataset, K: np.ndarray, spec: LikelihoodSpec,
                config: LaplaceConfig = LaplaceConfig()) -> LaplaceState:
    """
        Find the posterior mode of the latent values and the Gaussian approximation around it.
        Newton iteration:
            - Works with a = K^-1 f so no inverse of K is formed.
            - The direction uses max(W, 0) so that it stays an ascent direction when the
              likelihood is not log-concave; the posterior uses the true W.
            - Steps are halved until the log posterior increases.
        Returns a LaplaceState whose log_marginal is the Laplace evidence approximation.
    """
    n = data.n
    if K.shape != (n, n):
        raise InvalidInputError(f"covariance is {K.shape} for {n} observations")
    data.validate_for(spec.kind)
    y, censored = data.y, data.censored

    a = np.zeros(n)
    psi, f, value, first, second = _objective(a, K, y, spec, censored)
    trace: List[float] = [psi]
    iterations = 0
    converged = False
    for iterations in range(1, config.max_iter + 1):
        gradient = np.max(np.abs(a - first))
        if gradient < config.tol:
            converged = True
            break
        W = np.maximum(-second, 0.0)
        # Step 1: Newton target for a
        s = np.sqrt(W)
        L = scipy.linalg.cholesky(np.eye(n) + s[:, None] * K * s[None, :], lower=True)
        b = W * f + first
        a_target = b - s * scipy.linalg.cho_solve((L, True), s * (K @ b))
        direction = a_target - a

        # Step 2: backtracking line search on the log posterior
        step = 1.0
        for _ in range(config.max_backtracks):
            candidate = _objective(a + step * direction, K, y, spec, censored)
            if np.isfinite(candidate[0]) and candidate[0] >= psi:
                break
            step *= 0.5
        else:
            if gradient < config.stall_tol:
                logger.debug(f"Line search stalled at gradient {gradient:.2e}; accepting the mode")
                converged = True
                break
            logger.error(f"Laplace line search failed after {config.max_backtracks} halvings")
            raise NonConvergenceError("Newton line search failed to increase the log posterior", trace)
        a = a + step * direction
        psi, f, value, first, second = candidate
        trace.append(psi)
        logger.debug(f"Newton iteration {iterations}: log posterior {psi:.10f}, step {step:g}")
    else:
        gradient = np.max(np.abs(a - first))
        converged = gradient < config.stall_tol
    if not converged:
        logger.error(f"Laplace did not converge in {config.max_iter} iterations")
        raise NonConvergenceError(f"Newton iteration did not converge in {config.max_iter} iterations", trace)

    return _laplace_state(a, f, value, first, second, K, iterations)


def _laplace_state(a, f, value, first, second, K, iterations) -> LaplaceState:
    W = -second
    absent = np.abs(W) < NO_SITE_CURVATURE
    tau = np.where(absent, 0.0, W)
    nu = tau * f + np.where(absent, 0.0, first)
    with np.errstate(divide='ignore', invalid='ignore'):
        log_z = np.where(tau > 0, value + 0.5 * np.log(2 * np.pi / np.where(tau > 0, tau, 1.0))
                         + 0.5 * first ** 2 / np.where(tau > 0, tau, 1.0), 0.0)
    sites = SiteParams(log_z, tau, nu)
    Sigma, log_det = site_covariance(K, tau)
    log_marginal = float(np.sum(value) - 0.5 * a @ f - 0.5 * log_det)
    posterior = GaussianPosterior(f, Sigma, log_marginal)

    flags = {}
    for i in np.flatnonzero(absent):
        flags[int(i)] = 'no-site'
    for i in np.flatnonzero(tau < 0):
        flags[int(i)] = 'negative-site'
    if flags:
        logger.warning(f"Laplace sites without positive curvature at {len(flags)} points")
    logger.info(f"Laplace converged in {iterations} iterations, log marginal {log_marginal:.6f}")
    return LaplaceState(f, first, W, posterior, sites, a, iterations, flags)


def la_loo_cavity_lr(state: LaplaceState, i: int) -> CavityDistribution:
    """
        LOO latent marginal of point i from the linear-response form:
        mean f_hat_i - v_i g_i with v_i = (1/Sigma_ii - W_i)^-1.
    """
    if not 0 <= i < state.n:
        raise InvalidInputError(f"point index {i} out of range for n={state.n}")
    precision = 1.0 / state.posterior.var[i] - state.sites.tau[i]
    if not precision > 0:
        raise CavityFailureError(i, precision)
    var = 1.0 / precision
    return CavityDistribution(state.mode[i] - var * state.grad[i] * (state.sites.tau[i] != 0), var)


def la_loo_cavities(state: LaplaceState) -> CavityDistribution:
    """Linear-response cavities for every point; failures recorded instead of raised."""
    precision = 1.0 / state.posterior.var - state.sites.tau
    failed = ~(precision > 0)
    if failed.any():
        logger.warning(f"LA-LOO cavity failed at points {np.flatnonzero(failed).tolist()[:10]}")
    var = np.where(failed, np.nan, 1.0 / np.where(failed, 1.0, precision))
    mean = state.mode - var * np.where(state.sites.tau != 0, state.grad, 0.0)
    return CavityDistribution(mean, var, failed)

