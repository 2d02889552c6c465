"""Discrete measures, candidate sets and problem instances.

Everything here is immutable after construction. Arrays are stored as
read-only float64 numpy arrays so instances can be shared freely between
client workers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

INSTANCE_FORMAT_VERSION = 1
WEIGHT_SUM_TOL = 1e-12


class InstanceError(ValueError):
    """Raised when instance data violates an invariant.

    ``invariant`` names the violated rule so callers (and the CLI) can
    report it without parsing the message.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(message)
        self.invariant = invariant


def _frozen_points(points: Any, what: str) -> np.ndarray:
    try:
        arr = np.array(points, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InstanceError("dimension", f"{what}: ragged or non-numeric point list") from exc
    if arr.ndim == 1 and arr.size > 0:
        # a flat list of scalars is a 1-d cloud
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InstanceError("nonempty", f"{what}: must contain at least one point")
    if arr.shape[1] == 0:
        raise InstanceError("dimension", f"{what}: points must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise InstanceError("finite", f"{what}: all coordinates must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParticleCloud:
    """Private sample of one client, shape ``(n, dim)``."""

    points: np.ndarray

    def __init__(self, points: Any):
        object.__setattr__(self, "points", _frozen_points(points, "particle cloud"))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CandidateSet:
    """The K pre-selected locations the barycenter support is chosen from."""

    points: np.ndarray

    def __init__(self, points: Any):
        object.__setattr__(self, "points", _frozen_points(points, "candidate set"))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def K(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Client:
    cloud: ParticleCloud
    weight: float


@dataclass(frozen=True)
class ProblemInstance:
    """N weighted particle clouds, K candidates, support budget M, order p.

    Use :func:`validate_instance` (or :meth:`from_dict`) to build one; the
    constructor assumes already-checked parts.
    """

    clients: tuple[Client, ...]
    candidates: CandidateSet
    M: int
    p: float = 2.0
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def N(self) -> int:
        return len(self.clients)

    @property
    def K(self) -> int:
        return self.candidates.K

    @property
    def dim(self) -> int:
        return self.candidates.dim

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clients])

    def local_weight(self, s: int) -> float:
        """``w_s = lambda_s / M``, the cost scaling a client applies locally."""
        return self.clients[s].weight / self.M

    def to_dict(self) -> dict:
        return {
            "version": INSTANCE_FORMAT_VERSION,
            "p": float(self.p),
            "M": int(self.M),
            "candidates": self.candidates.points.tolist(),
            "clients": [
                {"weight": float(c.weight), "particles": c.cloud.points.tolist()}
                for c in self.clients
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict, renormalize: bool = False) -> "ProblemInstance":
        return validate_instance(raw, renormalize=renormalize)

    def content_hash(self) -> str:
        """sha256 of the canonical JSON body (metadata excluded)."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()

    def with_M(self, M: int) -> "ProblemInstance":
        raw = self.to_dict()
        raw["M"] = M
        return validate_instance(raw)


def validate_instance(raw: dict, renormalize: bool = False) -> ProblemInstance:
    """Check raw instance data and build a :class:`ProblemInstance`.

    Parameters
    ----------
    raw : dict
        Mapping in the canonical file layout (``p``, ``M``, ``candidates``,
        ``clients`` with ``weight`` and ``particles``).
    renormalize : bool
        Rescale client weights to sum to one instead of rejecting them.

    Raises
    ------
    InstanceError
        Naming the violated invariant.
    """
    if not isinstance(raw, dict):
        raise InstanceError("format", "instance must be a JSON object")
    version = raw.get("version", INSTANCE_FORMAT_VERSION)
    if version != INSTANCE_FORMAT_VERSION:
        raise InstanceError("version", f"unsupported instance version {version!r}")
    for key in ("M", "candidates", "clients"):
        if key not in raw:
            raise InstanceError("format", f"missing field {key!r}")

    p = float(raw.get("p", 2.0))
    if not (p >= 1.0 and math.isfinite(p)):
        raise InstanceError("order", f"order p must be >= 1, got {p}")

    candidates = CandidateSet(raw["candidates"])
    if not raw["clients"]:
        raise InstanceError("nonempty", "instance needs at least one client")

    weights = []
    clouds = []
    for s, entry in enumerate(raw["clients"]):
        if not isinstance(entry, dict) or "particles" not in entry or "weight" not in entry:
            raise InstanceError("format", f"client {s}: needs 'weight' and 'particles'")
        cloud = ParticleCloud(entry["particles"])
        if cloud.dim != candidates.dim:
            raise InstanceError(
                "dimension",
                f"client {s}: particle dimension {cloud.dim} != candidate dimension {candidates.dim}",
            )
        w = float(entry["weight"])
        if not (w > 0.0 and math.isfinite(w)):
            raise InstanceError("weight", f"client {s}: weight must be positive, got {w}")
        weights.append(w)
        clouds.append(cloud)

    total = math.fsum(weights)
    if renormalize:
        weights = [w / total for w in weights]
    elif abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise InstanceError("weight_sum", f"weights must sum to 1 (got {total!r})")
    if any(w > 1.0 for w in weights):
        raise InstanceError("weight", "client weights must lie in (0, 1]")

    M = raw["M"]
    if isinstance(M, bool) or not isinstance(M, (int, np.integer)) or M < 1:
        raise InstanceError("budget", f"M must be a positive integer, got {M!r}")
    if M > candidates.K:
        raise InstanceError("budget", f"M exceeds candidate count ({M} > {candidates.K})")

    clients = tuple(Client(c, w) for c, w in zip(clouds, weights))
    meta = dict(raw.get("meta", {}))
    return ProblemInstance(clients=clients, candidates=candidates, M=int(M), p=p, meta=meta)


def pairwise_cost(a: Any, b: Any, p: float = 2.0) -> np.ndarray:
    """Matrix of powered Euclidean distances ``|a_i - b_j|^p``.

    For ``p == 2`` the squared distance is formed from coordinate
    differences (not the expanded dot-product form), so 1-d integer inputs
    give exact results.
    """
    A = _frozen_points(a, "first point list")
    B = _frozen_points(b, "second point list")
    if A.shape[1] != B.shape[1]:
        raise InstanceError("dimension", f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if p < 1:
        raise InstanceError("order", f"order p must be >= 1, got {p}")
    diff = A[:, None, :] - B[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if p == 2:
        return sq
    if A.shape[1] == 1:
        return np.abs(diff[:, :, 0]) ** p
    return np.sqrt(sq) ** p


@dataclass(frozen=True)
class CostProfile:
    """One ``|I^s| x K`` matrix of powered distances per client."""

    matrices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.matrices)

    def __getitem__(self, s: int) -> np.ndarray:
        return self.matrices[s]

    @property
    def K(self) -> int:
        return self.matrices[0].shape[1]

    @classmethod
    def from_matrices(cls, matrices: Sequence[Any]) -> "CostProfile":
        frozen = []
        for m in matrices:
            arr = np.array(m, dtype=np.float64)
            if arr.ndim != 2 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise InstanceError("cost", "cost matrices must be finite, nonnegative and 2-d")
            arr.setflags(write=False)
            frozen.append(arr)
        if len({m.shape[1] for m in frozen}) != 1:
            raise InstanceError("dimension", "all cost matrices must have K columns")
        return cls(tuple(frozen))


def build_cost_profile(instance: ProblemInstance) -> CostProfile:
    """Precompute every client's cost block against the candidate set."""
    Z = instance.candidates.points
    mats = []
    for client in instance.clients:
        m = pairwise_cost(client.cloud.points, Z, instance.p)
        m.setflags(write=False)
        mats.append(m)
    return CostProfile(tuple(mats))


def load_instance(path: str | Path, renormalize: bool = False) -> ProblemInstance:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InstanceError("format", f"{path}: not valid JSON ({exc})") from exc
    return validate_instance(raw, renormalize=renormalize)


def save_instance(instance: ProblemInstance, path: str | Path) -> None:
    body = instance.to_dict()
    if instance.meta:
        body["meta"] = instance.meta
    with open(path, "w") as fh:
        json.dump(body, fh)
