import numpy as np
import pytest

from fedbary.datagen import (
    GmmSpec,
    FIVE_COV,
    FIVE_MEANS,
    SKEWED_WEIGHTS,
    make_candidates,
    paper_preset_5,
    random_gmm_preset,
    sample_gmm,
)
from fedbary.measures import InstanceError


def test_degenerate_variance():
    spec = GmmSpec([1.0], [[1.5, -2.0]], 1e-12 * np.eye(2))
    cloud = sample_gmm(spec, 200, seed=3)
    assert np.abs(cloud.points - [1.5, -2.0]).max() <= 1e-5


def test_standard_normal_moments():
    cloud = sample_gmm(GmmSpec([1.0], [[0.0, 0.0]], np.eye(2)), 10_000, seed=0)
    assert np.abs(cloud.points.mean(0)).max() <= 0.05
    assert np.abs(np.cov(cloud.points.T) - np.eye(2)).max() <= 0.1


def test_same_seed_same_cloud():
    spec = GmmSpec([0.3, 0.7], FIVE_MEANS[:2], FIVE_COV)
    a, b = sample_gmm(spec, 50, seed=8), sample_gmm(spec, 50, seed=8)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_gmm(spec, 50, seed=9).points)


def test_spec_validation():
    with pytest.raises(InstanceError, match="positive definite"):
        GmmSpec([1.0], [[0.0, 0.0]], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InstanceError, match="symmetric"):
        GmmSpec([1.0], [[0.0, 0.0]], [[1.0, 0.1], [0.0, 1.0]])
    with pytest.raises(InstanceError, match="sum to 1"):
        GmmSpec([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])


@pytest.mark.parametrize(
    "weights",
    [[0.2] * 5, list(SKEWED_WEIGHTS), [0.166, 0.385, 0.063, 0.321, 0.065]],
)
def test_paper_preset_configurations(weights):
    inst = paper_preset_5(weights, n=40, K=60, M=15, seed=1)
    assert inst.N == 5 and inst.K == 60 and inst.M == 15 and inst.p == 2.0
    assert np.allclose(inst.weights, weights, rtol=0, atol=1e-12)


def test_paper_preset_means():
    n = 500
    inst = paper_preset_5(n=n, K=10, M=5, seed=42)
    sd = np.sqrt(np.diag(FIVE_COV))
    for client, mu in zip(inst.clients, FIVE_MEANS):
        err = np.abs(client.cloud.points.mean(0) - mu)
        assert np.all(err <= 3.5 * sd / np.sqrt(n))


def test_mixture_clients_flag():
    inst = paper_preset_5(n=400, K=10, M=5, seed=2, mixture_clients=True)
    spread = [c.cloud.points.std(0).max() for c in inst.clients]
    assert min(spread) > 1.0


def test_candidate_modes():
    assert np.allclose(make_candidates("grid", 4, dim=1, scale=1.0).ravel(), [-1, -1 / 3, 1 / 3, 1])
    g = make_candidates("grid", 9, dim=2, scale=2.0)
    assert g.shape == (9, 2) and g.min() == -2.0 and g.max() == 2.0
    z = make_candidates("normal", 1000, scale=5.0, seed=0)
    assert z.shape == (1000, 2)
    assert np.abs(z.var(0) - 5.0).max() < 0.75
    assert np.array_equal(z, make_candidates("normal", 1000, scale=5.0, seed=0))


def test_pooled_sample_limits():
    spec = GmmSpec([1.0], [[0.0]], [[1.0]])
    clouds = [sample_gmm(spec, 5, seed=1), sample_gmm(spec, 5, seed=2)]
    z = make_candidates("pooled-sample", 8, dim=1, clouds=clouds)
    pool = np.concatenate([c.points for c in clouds])
    assert all(any(np.array_equal(p, q) for q in pool) for p in z)
    with pytest.raises(ValueError):
        make_candidates("pooled-sample", 11, dim=1, clouds=clouds)


def test_generators_are_pure():
    a = random_gmm_preset(n=30, K=20, M=5, seed=4)
    b = random_gmm_preset(n=30, K=20, M=5, seed=4)
    assert a.content_hash() == b.content_hash() and a.N == 10
    assert a.meta["seed"] == 4 and "rng" in a.meta
