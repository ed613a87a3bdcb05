import numpy as np
import pytest

from rapsa.data_io import SyntheticSpec, generate_linear_problem
from rapsa.problems import LeastSquaresProblem, LogisticProblem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ls(rng):
    H = rng.standard_normal((40, 8))
    z = rng.standard_normal(40)
    return LeastSquaresProblem(H, z)


@pytest.fixture
def small_logistic(rng):
    Z = rng.standard_normal((60, 6))
    y = np.where(rng.random(60) < 0.5, -1.0, 1.0)
    return LogisticProblem(Z, y, 0.1)


@pytest.fixture(scope="session")
def replica():
    """The p=128, N=1000 synthetic linear-regression problem."""
    problem, _ = generate_linear_problem(SyntheticSpec(128, 1000, 1e-2, 0))
    return problem
