import numpy as np
import pytest

from fedbary.datagen import GmmSpec, FIVE_COV, FIVE_MEANS, instance_from_gmm
from fedbary.measures import validate_instance


def tiny(clients, candidates, M, p=2.0):
    """Build an instance from 1-d particle lists and weights."""
    return validate_instance(
        {
            "p": p,
            "M": M,
            "candidates": [[float(z)] for z in candidates],
            "clients": [{"weight": w, "particles": [[float(x)] for x in pts]} for w, pts in clients],
        }
    )


@pytest.fixture
def t2():
    return tiny([(1.0, [0, 2])], [0, 1, 2], M=2)


@pytest.fixture
def t1():
    return tiny([(1.0, [0, 2])], [0, 1, 2], M=1)


@pytest.fixture
def t3():
    return tiny([(0.5, [0]), (0.5, [2])], [0, 1, 2], M=1)


def desk3_instance(n=300, K=400, M=100, seed=7):
    spec = GmmSpec([0.5, 0.3, 0.2], FIVE_MEANS[:3], FIVE_COV)
    return instance_from_gmm(spec, [0.5, 0.3, 0.2], n=n, M=M, seed=seed, K=K)


@pytest.fixture(scope="session")
def desk3():
    return desk3_instance()


def random_tiny_costs(rng, max_clients=3, max_particles=4, max_K=7, max_M=3, integer=False):
    """Random cost blocks, weights and M for Lagrangian-level checks."""
    N = int(rng.integers(1, max_clients + 1))
    K = int(rng.integers(2, max_K + 1))
    M = int(rng.integers(1, min(max_M, K) + 1))
    sizes = rng.integers(1, max_particles + 1, size=N)
    if integer:
        blocks = [rng.integers(0, 11, size=(n, K)).astype(np.float64) for n in sizes]
    else:
        blocks = [rng.uniform(0.0, 10.0, size=(n, K)) for n in sizes]
    lam = rng.dirichlet(np.ones(N))
    return blocks, lam, M
