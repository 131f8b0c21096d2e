import logging
from dataclasses import dataclass, replace
from typing import Tuple, Union

import numpy as np

from .dataset import Dataset
from .ep import EPConfig, EPState, ep_fit
from .errors import GPLooError, InvalidInputError
from .hyperparams import HyperParams, Prior, hyperparams_of
from .kernels import CompositeKernel, build_covariance, cross_covariance, prior_variance
from .laplace import LaplaceConfig, LaplaceState, laplace_fit
from .likelihoods import LikelihoodSpec
from .posterior import GaussianPosterior, predict

logger = logging.getLogger('model')

INFERENCE_METHODS = ('laplace', 'ep')

LatentState = Union[LaplaceState, EPState]


@dataclass(frozen=True)
class FittedModel:
    """Latent approximation at one hyperparameter setting."""
    model: 'GPModel'
    hp: HyperParams
    kernel: CompositeKernel
    likelihood: LikelihoodSpec
    K: np.ndarray
    state: LatentState

    @property
    def method(self) -> str:
        return self.model.method

    @property
    def posterior(self) -> GaussianPosterior:
        return self.state.posterior

    @property
    def log_marginal(self) -> float:
        return self.state.posterior.log_marginal

    @property
    def data(self) -> Dataset:
        return self.model.data

    def predict_latent(self, x_new: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Latent predictive mean and variance at new covariates."""
        k_star = cross_covariance(self.data.x, x_new, self.kernel)
        return predict(self.K, self.state.sites, k_star, prior_variance(x_new, self.kernel))


@dataclass(frozen=True)
class GPModel:
    """
        A Gaussian latent variable model: dataset, covariance function, observation model and
        hyperprior, fitted with either the Laplace approximation or parallel EP.
    """
    data: Dataset
    kernel: CompositeKernel
    likelihood: LikelihoodSpec
    prior: Prior = Prior()
    method: str = 'laplace'
    laplace_config: LaplaceConfig = LaplaceConfig()
    ep_config: EPConfig = EPConfig()

    def __post_init__(self):
        if self.method not in INFERENCE_METHODS:
            raise InvalidInputError(f"unknown inference method '{self.method}', expected one of {INFERENCE_METHODS}")
        for c in self.kernel.components:
            c.check_dimension(self.data.d)
        self.data.validate_for(self.likelihood.kind)

    def hyperparams(self) -> HyperParams:
        return hyperparams_of(self.kernel, self.likelihood)

    def with_data(self, data: Dataset) -> 'GPModel':
        return replace(self, data=data)

    def with_method(self, method: str) -> 'GPModel':
        return replace(self, method=method)

    def at(self, hp: HyperParams) -> 'GPModel':
        """The same model with its kernel and likelihood set to `hp`."""
        kernel, likelihood = hp.apply(self.kernel, self.likelihood)
        return replace(self, kernel=kernel, likelihood=likelihood)

    def fit(self, hp: HyperParams = None) -> FittedModel:
        hp = self.hyperparams() if hp is None else hp
        kernel, likelihood = hp.apply(self.kernel, self.likelihood)
        K = build_covariance(self.data.x, kernel)
        if self.method == 'laplace':
            state = laplace_fit(self.data, K, likelihood, self.laplace_config)
        else:
            state = ep_fit(self.data, K, likelihood, self.ep_config)
        return FittedModel(self, hp, kernel, likelihood, K, state)

    def log_posterior(self, hp: HyperParams) -> float:
        """Approximate log marginal likelihood plus log hyperprior; -inf when the fit fails."""
        try:
            return self.fit(hp).log_marginal + self.prior.log_density(hp)
        except GPLooError as e:
            logger.debug(f"Fit failed at {hp.as_dict()}: {e}")
            return -np.inf
