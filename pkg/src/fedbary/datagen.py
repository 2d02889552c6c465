"""Synthetic instances: Gaussian mixture clients and candidate sets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .measures import InstanceError, ParticleCloud, ProblemInstance, validate_instance

FIVE_MEANS = np.array([[-2.0, -2.0], [2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [0.0, 0.0]])
FIVE_COV = np.array([[0.5, -0.2], [-0.2, 0.5]])
SKEWED_WEIGHTS = (0.7, 0.1, 0.05, 0.05, 0.1)


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __init__(self, weights, means, covs):
        w = np.asarray(weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        cov = np.asarray(covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (mu.shape[0],) + cov.shape).copy()
        if w.shape != (mu.shape[0],) or cov.shape != (mu.shape[0], mu.shape[1], mu.shape[1]):
            raise InstanceError("dimension", "mixture weights, means and covariances disagree in shape")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InstanceError("weight_sum", "mixture weights must be nonnegative and sum to 1")
        for c in cov:
            if not np.allclose(c, c.T, atol=0.0):
                raise InstanceError("covariance", "covariance matrices must be symmetric")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise InstanceError("covariance", "covariance matrices must be positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, c: int) -> "GmmSpec":
        return GmmSpec([1.0], self.means[c : c + 1], self.covs[c : c + 1])


def sample_gmm(spec: GmmSpec, n: int, seed: int = 0, rng: Optional[np.random.Generator] = None) -> ParticleCloud:
    """Draw ``n`` points: a component per draw, then a Cholesky-factored normal."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else seeding.stream(seed, seeding.DATA)
    labels = rng.choice(spec.weights.shape[0], size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.dim))
    out = np.empty((n, spec.dim))
    for c in range(spec.weights.shape[0]):
        rows = labels == c
        L = np.linalg.cholesky(spec.covs[c])
        out[rows] = spec.means[c] + z[rows] @ L.T
    return ParticleCloud(out)


def _lattice_side(K: int, dim: int) -> int:
    side = max(1, round(K ** (1.0 / dim)))
    while side**dim < K:
        side += 1
    while side > 1 and (side - 1) ** dim >= K:
        side -= 1
    return side


def make_candidates(
    mode: str,
    K: int,
    dim: int = 2,
    scale: float = 5.0,
    seed: int = 0,
    clouds: Optional[Sequence[ParticleCloud]] = None,
) -> np.ndarray:
    """Candidate locations.

    ``grid``: a regular lattice with ``ceil(K ** (1 / dim))`` points per axis
    over ``[-scale, scale]`` (so possibly more than K points).
    ``normal``: K draws from ``N(0, scale * I)``; ``scale`` is the variance.
    ``pooled-sample``: K distinct particles from the union of ``clouds``.
    This one reads private data and exists for tests only.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if mode == "grid":
        side = _lattice_side(K, dim)
        axis = np.linspace(-scale, scale, side) if side > 1 else np.zeros(1)
        return np.array(list(itertools.product(axis, repeat=dim)))
    rng = seeding.stream(seed, seeding.CANDIDATES)
    if mode == "normal":
        return rng.standard_normal((K, dim)) * np.sqrt(scale)
    if mode == "pooled-sample":
        if not clouds:
            raise ValueError("pooled-sample candidates need the client clouds")
        pool = np.concatenate([c.points for c in clouds])
        if K > pool.shape[0]:
            raise ValueError(f"cannot draw {K} candidates from {pool.shape[0]} pooled particles")
        return pool[np.sort(rng.choice(pool.shape[0], size=K, replace=False))]
    raise ValueError(f"unknown candidate mode {mode!r}")


def _meta(preset: str, seed: int, **extra) -> dict:
    return {"generator": preset, "seed": seed, "rng": seeding.RNG_DESCRIPTION, **extra}


def instance_from_gmm(
    spec: GmmSpec,
    client_weights: Sequence[float],
    n: int,
    M: int,
    seed: int,
    K: int = 1000,
    candidates: str = "normal",
    scale: float = 5.0,
    mixture_clients: bool = False,
    preset: str = "gmm",
) -> ProblemInstance:
    """One client per mixture component (or, with ``mixture_clients``, per mixture copy)."""
    clouds = []
    for s in range(len(client_weights)):
        part = spec if mixture_clients else spec.component(s)
        clouds.append(sample_gmm(part, n, rng=seeding.stream(seed, seeding.DATA, s)))
    Z = make_candidates(candidates, K, spec.dim, scale, seed, clouds)
    raw = {
        "p": 2.0,
        "M": M,
        "candidates": Z.tolist(),
        "clients": [
            {"weight": float(w), "particles": c.points.tolist()} for w, c in zip(client_weights, clouds)
        ],
        "meta": _meta(preset, seed, n=n, K=K, candidates=candidates, scale=scale,
                      mixture_clients=mixture_clients),
    }
    return validate_instance(raw)


def paper_preset_5(
    weights: Sequence[float] = SKEWED_WEIGHTS,
    n: int = 500,
    seed: int = 0,
    K: int = 1000,
    M: int = 250,
    candidates: str = "normal",
    scale: float = 5.0,
    mixture_clients: bool = False,
) -> ProblemInstance:
    """Five 2-d Gaussians at the square's corners and centre, shared covariance."""
    if len(weights) != 5:
        raise ValueError("the five-component preset needs exactly five weights")
    w = np.asarray(weights, dtype=np.float64)
    spec = GmmSpec(w / w.sum(), FIVE_MEANS, FIVE_COV)
    return instance_from_gmm(spec, weights, n, M, seed, K, candidates, scale, mixture_clients, "paper5")


def random_gmm_preset(
    n_components: int = 10,
    n: int = 500,
    seed: int = 0,
    K: int = 1000,
    M: int = 250,
    candidates: str = "normal",
    scale: float = 5.0,
) -> ProblemInstance:
    """Randomly drawn weights, means and covariances (a seeded generator, not golden data)."""
    rng = seeding.stream(seed, seeding.DATA, 1 << 32)
    weights = rng.dirichlet(np.ones(n_components))
    means = rng.uniform(-4.0, 4.0, size=(n_components, 2))
    covs = []
    for _ in range(n_components):
        A = rng.normal(scale=0.5, size=(2, 2))
        covs.append(A @ A.T + 0.1 * np.eye(2))
    spec = GmmSpec(weights, means, np.array(covs))
    # weights sum to one only up to rounding; renormalize the last one exactly
    client_w = list(weights[:-1]) + [1.0 - float(np.sum(weights[:-1]))]
    return instance_from_gmm(spec, client_w, n, M, seed, K, candidates, scale, False, f"gmm{n_components}")
