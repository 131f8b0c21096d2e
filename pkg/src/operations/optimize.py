import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import DegenerateModelError, InvalidInputError
from .hyperparams import HyperParams
from .model import GPModel

logger = logging.getLogger('optimize')

# Objective value standing in for hyperparameters at which the fit fails
FAILED_OBJECTIVE = 1e25
MAX_RESTARTS = 5
RESTART_TOL = 1e-7
HESSIAN_STEP = 1e-3


@dataclass(frozen=True)
class CurvatureScales:
    """
        Eigen-decomposition of the negative log-posterior Hessian at `center`.
        `transform` maps standardized coordinates z to center + transform @ z.
    """
    center: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def transform(self) -> np.ndarray:
        return self.eigenvectors / np.sqrt(self.eigenvalues)[None, :]

    @property
    def std(self) -> np.ndarray:
        """Marginal standard deviations implied by the inverse Hessian."""
        return np.sqrt(np.sum(self.transform ** 2, axis=1))

    def to_params(self, z: np.ndarray) -> np.ndarray:
        return self.center + np.asarray(z, dtype=float) @ self.transform.T


def map_optimize(model: GPModel, init: HyperParams = None, max_restarts: int = MAX_RESTARTS,
                 tol: float = RESTART_TOL) -> HyperParams:
    """
        Type-II MAP: maximize the approximate log marginal likelihood plus log hyperprior on the
        unconstrained scale with BFGS and finite-difference gradients.
        Restarts from the latest point until it moves less than `tol`; a run that ends worse than
        its start is discarded, so the objective never decreases.
    """
    init = model.hyperparams() if init is None else init

    def objective(vector: np.ndarray) -> float:
        value = model.log_posterior(init.with_vector(vector))
        return -value if np.isfinite(value) else FAILED_OBJECTIVE

    x = init.vector()
    best = objective(x)
    if best >= FAILED_OBJECTIVE:
        raise InvalidInputError(f"model cannot be fitted at the initial hyperparameters {init.as_dict()}")
    logger.info(f"MAP search from log posterior {-best:.6f} over {init.size} hyperparameters")
    converged = False
    for restart in range(max_restarts):
        result = minimize(objective, x, method='BFGS', jac='3-point', options={'gtol': 1e-6, 'maxiter': 200})
        if not result.fun < best:
            converged = True
            break
        move = float(np.max(np.abs(result.x - x)))
        x, best = result.x, float(result.fun)
        logger.debug(f"MAP run {restart + 1}: log posterior {-best:.8f}, moved {move:.2e}")
        if move < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"MAP search still moving after {max_restarts} runs; returning the best point found")
    hp = init.with_vector(x)
    logger.info(f"MAP log posterior {-best:.6f}")
    return hp


def hessian_scales(log_posterior: Callable[[np.ndarray], float], center: np.ndarray,
                   step: float = HESSIAN_STEP) -> CurvatureScales:
    """
        Central finite-difference Hessian of -log posterior at `center` and its eigen-decomposition.
        Non-positive curvature directions raise DegenerateModelError.
    """
    center = np.asarray(center, dtype=float)
    p = center.size
    if p == 0:
        raise InvalidInputError("no hyperparameters to integrate over")
    f0 = -log_posterior(center)
    H = np.empty((p, p))
    eye = np.eye(p) * step
    for i in range(p):
        plus, minus = -log_posterior(center + eye[i]), -log_posterior(center - eye[i])
        H[i, i] = (plus - 2 * f0 + minus) / step ** 2
        for j in range(i):
            value = (-log_posterior(center + eye[i] + eye[j]) + log_posterior(center + eye[i] - eye[j])
                     + log_posterior(center - eye[i] + eye[j]) - log_posterior(center - eye[i] - eye[j]))
            H[i, j] = H[j, i] = value / (4 * step ** 2)
    if not np.all(np.isfinite(H)):
        raise DegenerateModelError("log posterior is not finite around the mode")
    eigenvalues, eigenvectors = np.linalg.eigh(H)
    if np.any(eigenvalues <= 0):
        logger.error(f"Hessian at the mode has non-positive eigenvalues {eigenvalues.tolist()}")
        raise DegenerateModelError("log posterior is not locally concave at the mode")
    return CurvatureScales(center, eigenvalues, eigenvectors)
