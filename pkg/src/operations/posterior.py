"""
Gaussian approximations shared by the Laplace and EP fits.

Sites are held in natural parameters: precision tau = 1/site variance and
shift nu = site mean / site variance. A zero precision is a missing site (variance +inf).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import CavityFailureError, InvalidInputError, NotPositiveDefiniteError

logger = logging.getLogger('posterior')


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SiteParams:
    log_z: np.ndarray
    tau: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'log_z', _frozen(self.log_z))
        object.__setattr__(self, 'tau', _frozen(self.tau))
        object.__setattr__(self, 'nu', _frozen(self.nu))
        if not (self.log_z.shape == self.tau.shape == self.nu.shape):
            raise InvalidInputError("site parameter vectors must share one length")

    @property
    def n(self) -> int:
        return self.tau.size

    @property
    def variance(self) -> np.ndarray:
        """Site variances; +inf for missing sites and negative for negative precisions."""
        with np.errstate(divide='ignore'):
            return np.where(self.tau == 0, np.inf, 1.0 / np.where(self.tau == 0, 1.0, self.tau))

    @property
    def mean(self) -> np.ndarray:
        return np.where(self.tau == 0, 0.0, self.nu / np.where(self.tau == 0, 1.0, self.tau))

    @property
    def negative(self) -> np.ndarray:
        return self.tau < 0

    @classmethod
    def empty(cls, n: int) -> 'SiteParams':
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    @classmethod
    def from_moments(cls, mean, variance, log_z=None) -> 'SiteParams':
        variance = np.asarray(variance, dtype=float)
        tau = np.where(np.isinf(variance), 0.0, 1.0 / variance)
        nu = tau * np.asarray(mean, dtype=float)
        return cls(np.zeros_like(tau) if log_z is None else log_z, tau, nu)


@dataclass(frozen=True)
class GaussianPosterior:
    """Joint Gaussian over the latent values with the approximate log marginal likelihood."""
    mean: np.ndarray
    cov: np.ndarray
    log_marginal: float

    def __post_init__(self):
        object.__setattr__(self, 'mean', _frozen(self.mean))
        object.__setattr__(self, 'cov', _frozen(self.cov))
        object.__setattr__(self, 'log_marginal', float(self.log_marginal))

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov)

    @property
    def n(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class CavityDistribution:
    """
        Leave-one-out latent marginals N(mean_i, var_i). Points whose cavity could not be formed
        carry NaN and are marked in `failed`.
    """
    mean: np.ndarray
    var: np.ndarray
    failed: Optional[np.ndarray] = None

    def __post_init__(self):
        mean, var = _frozen(np.atleast_1d(self.mean)), _frozen(np.atleast_1d(self.var))
        failed = np.zeros(mean.shape, dtype=bool) if self.failed is None else np.array(self.failed, dtype=bool)
        failed.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'var', var)
        object.__setattr__(self, 'failed', failed)

    @property
    def n(self) -> int:
        return self.mean.size

    def point(self, i: int) -> Tuple[float, float]:
        if self.failed[i]:
            raise CavityFailureError(i, float('nan'))
        return float(self.mean[i]), float(self.var[i])


def cavity_remove(marginal_mean: float, marginal_var: float, site_mean: float, site_var: float,
                  index: int = -1) -> CavityDistribution:
    """
        Divide the marginal N(marginal_mean, marginal_var) by the site N(site_mean, site_var).
        An infinite site variance removes nothing.
    """
    if not marginal_var > 0:
        raise InvalidInputError("marginal variance must be positive")
    site_tau = 0.0 if np.isinf(site_var) else 1.0 / site_var
    site_nu = 0.0 if np.isinf(site_var) else site_mean / site_var
    precision = 1.0 / marginal_var - site_tau
    if not precision > 0:
        raise CavityFailureError(index, precision)
    var = 1.0 / precision
    return CavityDistribution(var * (marginal_mean / marginal_var - site_nu), var)


def cavities_from(posterior: GaussianPosterior, sites: SiteParams, min_precision: float = 0.0) -> CavityDistribution:
    """
        Vectorized site removal for every point. Precisions at or below `min_precision`
        are recorded as failures.
    """
    var = posterior.var
    precision = 1.0 / var - sites.tau
    shift = posterior.mean / var - sites.nu
    failed = ~(precision > min_precision)
    if failed.any():
        logger.warning(f"Cavity failed at {int(failed.sum())} points: {np.flatnonzero(failed).tolist()[:10]}")
    safe = np.where(failed, 1.0, precision)
    return CavityDistribution(np.where(failed, np.nan, shift / safe), np.where(failed, np.nan, 1.0 / safe), failed)


def site_covariance(K: np.ndarray, tau: np.ndarray) -> Tuple[np.ndarray, float]:
    """
        Return Sigma = (K^-1 + diag(tau))^-1 and log|I + K diag(tau)|.
        Non-negative precisions go through the Cholesky of I + S K S with S = sqrt(tau);
        otherwise a general solve is used and Sigma must stay positive definite.
    """
    n = K.shape[0]
    if np.all(tau >= 0):
        s = np.sqrt(tau)
        B = np.eye(n) + s[:, None] * K * s[None, :]
        try:
            L = scipy.linalg.cholesky(B, lower=True)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("I + S K S is not positive definite")
        V = scipy.linalg.solve_triangular(L, s[:, None] * K, lower=True)
        Sigma = K - V.T @ V
        log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    else:
        A = np.eye(n) + K * tau[None, :]
        sign, log_det = np.linalg.slogdet(A)
        if sign <= 0:
            raise NotPositiveDefiniteError("I + K T has a non-positive determinant")
        Sigma = np.linalg.solve(A, K)
        log_det = float(log_det)
    Sigma = 0.5 * (Sigma + Sigma.T)
    if not np.all(np.diag(Sigma) > 0):
        raise NotPositiveDefiniteError("posterior covariance has non-positive variances")
    if np.any(tau < 0):
        try:
            scipy.linalg.cholesky(Sigma, lower=True)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("negative site precisions made the posterior indefinite")
    return Sigma, log_det


def posterior_from_sites(K: np.ndarray, sites: SiteParams, log_marginal: float = float('nan')) -> GaussianPosterior:
    Sigma, _ = site_covariance(K, sites.tau)
    return GaussianPosterior(Sigma @ sites.nu, Sigma, log_marginal)


def predict(K: np.ndarray, sites: SiteParams, k_star: np.ndarray, k_star_star: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
        Latent predictive mean and variance at new inputs given the fitted sites.
        `k_star` is n x m (train x test) and `k_star_star` the m prior variances.
    """
    n = K.shape[0]
    if n == 0:
        return np.zeros(k_star.shape[1]), np.asarray(k_star_star, dtype=float).copy()
    A = np.eye(n) + sites.tau[:, None] * K
    mean = k_star.T @ np.linalg.solve(A, sites.nu)
    reduction = np.sum(k_star * np.linalg.solve(A, sites.tau[:, None] * k_star), axis=0)
    var = np.asarray(k_star_star, dtype=float) - reduction
    if np.any(var <= 0):
        raise NotPositiveDefiniteError("latent predictive variance is not positive")
    return mean, var
