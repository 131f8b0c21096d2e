import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .dataset import Dataset
from .errors import InvalidInputError, NonConvergenceError, NotPositiveDefiniteError
from .likelihoods import LikelihoodSpec, TiltedMoments, likelihood_moments
from .posterior import CavityDistribution, GaussianPosterior, SiteParams, site_covariance
from .quadrature import DEFAULT_NODES

logger = logging.getLogger('ep')


@dataclass(frozen=True)
class EPConfig:
    max_iter: int = 200
    tol: float = 1e-6
    damping: float = 0.8
    min_damping: float = 1e-4
    # lower cap on cavity precision for likelihoods that allow negative sites
    min_cavity_precision: float = 1e-8
    nodes: int = DEFAULT_NODES


@dataclass(frozen=True)
class EPState:
    sites: SiteParams
    posterior: GaussianPosterior
    cavities: CavityDistribution
    tilted_log_z0: np.ndarray
    tilted_mean: np.ndarray
    tilted_var: np.ndarray
    iterations: int
    converged: bool
    damping: float
    trace: List[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.sites.n


def _cavities(mean: np.ndarray, Sigma: np.ndarray, sites: SiteParams, spec: LikelihoodSpec,
              config: EPConfig) -> tuple:
    var = np.diag(Sigma)
    tau_cav = 1.0 / var - sites.tau
    nu_cav = mean / var - sites.nu
    low = tau_cav <= config.min_cavity_precision
    if np.any(low):
        if spec.log_concave:
            logger.warning(f"Non-positive cavity precision at {int(low.sum())} points of a log-concave model")
        else:
            logger.debug(f"Capping cavity precision at {int(low.sum())} points")
        tau_cav = np.where(low, config.min_cavity_precision, tau_cav)
    return tau_cav, nu_cav, low


def _log_z_ep(log_z0: np.ndarray, sites: SiteParams, Sigma: np.ndarray, log_det: float,
              tau_cav: np.ndarray, nu_cav: np.ndarray) -> float:
    tau, nu = sites.tau, sites.nu
    total = tau + tau_cav
    value = (np.sum(log_z0) - 0.5 * log_det + 0.5 * nu @ Sigma @ nu
             + 0.5 * nu_cav @ ((tau / tau_cav * nu_cav - 2 * nu) / total)
             - 0.5 * np.sum(nu ** 2 / total)
             + 0.5 * np.sum(np.log1p(tau / tau_cav)))
    return float(value)


def ep_fit(data: Dataset, K: np.ndarray, spec: LikelihoodSpec, config: EPConfig = EPConfig()) -> EPState:
    """
        Parallel expectation propagation.
        Each iteration:
            - Forms every cavity from the current joint approximation.
            - Computes the tilted moments of cavity times likelihood for all points.
            - Stops when the marginal moments match the tilted moments within `tol`.
            - Otherwise moves every site a damped step towards its moment-matched value and
              refreshes the joint Gaussian once.
        The damping factor is halved when the refreshed covariance is not positive definite or
        when the moment mismatch grows for two consecutive iterations.
    """
    n = data.n
    if K.shape != (n, n):
        raise InvalidInputError(f"covariance is {K.shape} for {n} observations")
    data.validate_for(spec.kind)
    y, censored = data.y, data.censored

    sites = SiteParams.empty(n)
    Sigma, log_det = K.copy(), 0.0
    mean = np.zeros(n)
    damping = config.damping
    trace: List[float] = []
    for iteration in range(1, config.max_iter + 1):
        # Step 1: cavities and tilted moments at the current approximation
        tau_cav, nu_cav, capped = _cavities(mean, Sigma, sites, spec, config)
        v_cav, m_cav = 1.0 / tau_cav, nu_cav / tau_cav
        tilted: TiltedMoments = likelihood_moments(y, m_cav, v_cav, spec, censored, config.nodes)
        mismatch = float(max(np.max(np.abs(tilted.mean - mean)), np.max(np.abs(tilted.var - np.diag(Sigma)))))
        trace.append(mismatch)
        logger.debug(f"EP iteration {iteration}: moment mismatch {mismatch:.3e}, damping {damping:g}")
        if mismatch < config.tol:
            log_marginal = _log_z_ep(tilted.log_z0, sites, Sigma, log_det, tau_cav, nu_cav)
            logger.info(f"EP converged in {iteration} iterations, log marginal {log_marginal:.6f}")
            sites = SiteParams(_site_log_z(tilted.log_z0, sites, tau_cav, nu_cav), sites.tau, sites.nu)
            return EPState(sites, GaussianPosterior(mean, Sigma, log_marginal),
                           CavityDistribution(m_cav, v_cav, capped), tilted.log_z0, tilted.mean, tilted.var,
                           iteration, True, damping, trace)
        if len(trace) >= 3 and trace[-1] > trace[-2] > trace[-3]:
            damping = max(0.5 * damping, config.min_damping)
            logger.debug(f"Moment mismatch rising, damping reduced to {damping:g}")

        # Step 2: damped site update with one joint refresh
        tau_target = 1.0 / tilted.var - tau_cav
        nu_target = tilted.mean / tilted.var - nu_cav
        if spec.log_concave:
            tau_target = np.maximum(tau_target, 0.0)
        while True:
            tau = sites.tau + damping * (tau_target - sites.tau)
            nu = sites.nu + damping * (nu_target - sites.nu)
            try:
                candidate_Sigma, candidate_log_det = site_covariance(K, tau)
                break
            except NotPositiveDefiniteError:
                damping *= 0.5
                logger.debug(f"Rejected site update, damping reduced to {damping:g}")
                if damping < config.min_damping:
                    logger.error("EP damping fell below its minimum")
                    raise NonConvergenceError("EP updates keep producing an indefinite covariance", trace)
        sites = SiteParams(sites.log_z, tau, nu)
        Sigma, log_det = candidate_Sigma, candidate_log_det
        mean = Sigma @ nu

    logger.error(f"EP did not converge in {config.max_iter} iterations (mismatch {trace[-1]:.3e})")
    raise NonConvergenceError(f"EP did not converge in {config.max_iter} iterations", trace)


def _site_log_z(log_z0: np.ndarray, sites: SiteParams, tau_cav: np.ndarray, nu_cav: np.ndarray) -> np.ndarray:
    """Site normalizers making cavity times site integrate to the tilted zeroth moment."""
    tau, nu = sites.tau, sites.nu
    with np.errstate(divide='ignore', invalid='ignore'):
        m_cav, v_cav = nu_cav / tau_cav, 1.0 / tau_cav
        site_var = np.where(tau == 0, np.inf, 1.0 / np.where(tau == 0, 1.0, tau))
        site_mean = np.where(tau == 0, 0.0, nu / np.where(tau == 0, 1.0, tau))
        log_norm = np.where(tau == 0, 0.0,
                            -0.5 * np.log(2 * np.pi * np.abs(v_cav + site_var))
                            - 0.5 * (site_mean - m_cav) ** 2 / (v_cav + site_var))
    return log_z0 - log_norm
