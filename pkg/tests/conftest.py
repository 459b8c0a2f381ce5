import os

import numpy as np
import pytest

from gridid.grid import build_admittance, load_grid
from gridid.phasors import NoiseSpec
from gridid.simulator import Scenario, run_scenario

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def feeder9():
    return load_grid(os.path.join(FIXTURES, "feeder9.grid"))


@pytest.fixture(scope="session")
def feeder9_Y(feeder9):
    return build_admittance(feeder9)


@pytest.fixture(scope="session")
def exact_run9(feeder9):
    """Zero-noise 9-bus scenario, 500 samples."""
    sc = Scenario(topology=feeder9, noise=NoiseSpec(), n_samples=500)
    return run_scenario(sc)


@pytest.fixture(scope="session")
def noisy_run9(feeder9):
    """Noisy, filtered 9-bus scenario used by several estimator tests."""
    sc = Scenario(topology=feeder9, noise=NoiseSpec.uniform(1e-4, seed=3),
                  n_samples=800, window=10)
    return run_scenario(sc)


def random_laplacian(n, rng, density=1.0):
    """Random symmetric complex Laplacian with g >= 0, b <= 0 lines."""
    Y = np.zeros((n, n), dtype=complex)
    for j in range(n):
        for i in range(j + 1, n):
            if rng.uniform() <= density or (i == j + 1):
                y = rng.uniform(0.5, 2.0) - 1j * rng.uniform(0.5, 2.0)
                Y[i, j] -= y
                Y[j, i] -= y
                Y[i, i] += y
                Y[j, j] += y
    return Y
