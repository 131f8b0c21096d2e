import os

import hypothesis
import numpy as np
import pytest

from src.operations.kernels import CompositeKernel, KernelSpec
from src.operations.likelihoods import LikelihoodSpec, gaussian_spec
from src.operations.model import GPModel
from src.operations.registry import classification, regression

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def se_kernel(magnitude: float = 1.0, length_scale: float = 1.0) -> CompositeKernel:
    return CompositeKernel((KernelSpec('squared-exponential', np.log(magnitude), (np.log(length_scale),)),))


@pytest.fixture
def regression_data():
    return regression(n=15, seed=3)


@pytest.fixture
def regression_model(regression_data):
    return GPModel(regression_data, se_kernel(), gaussian_spec(0.5))


@pytest.fixture
def probit_data():
    return classification(n=30, seed=5)


@pytest.fixture
def probit_model(probit_data):
    return GPModel(probit_data, se_kernel(2.0, 0.8), LikelihoodSpec('probit'))
