"""Entropic OT and the free-support fixed-point barycenter used for comparison.

The barycenter support moves to the weighted barycentric projection of
entropic plans from every client; this is the alternating Bregman
projection scheme with a Sinkhorn inner solver. Objectives are always
re-scored with the exact oracle.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import seeding
from .measures import ProblemInstance, pairwise_cost
from .oracle import support_objective

DEFAULT_REGS = (0.05, 0.1, 0.5)


class SinkhornOverflowError(FloatingPointError):
    pass


@dataclass
class SinkhornConfig:
    reg: float = 0.1
    tol: float = 1e-9
    maxiter: int = 1000
    log_domain: bool = False

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError("reg must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class SinkhornResult:
    plan: np.ndarray
    value: float
    iterations: int
    converged: bool
    marginal_error: float
    log_domain: bool
    f: Optional[np.ndarray] = field(default=None, repr=False)
    g: Optional[np.ndarray] = field(default=None, repr=False)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    top = x.max(axis=axis, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    out = np.log(np.exp(x - top).sum(axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def _residual(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(max(np.abs(plan.sum(1) - a).max(), np.abs(plan.sum(0) - b).max()))


def _sinkhorn_scaling(C, a, b, cfg: SinkhornConfig) -> SinkhornResult:
    kernel = np.exp(-C / cfg.reg)
    u = np.ones_like(a)
    v = np.ones_like(b)
    converged = False
    it = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for it in range(1, cfg.maxiter + 1):
            Kv = kernel @ v
            if np.abs(u * Kv - a).sum() <= cfg.tol:
                converged = True
                break
            u = a / Kv
            v = b / (kernel.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise SinkhornOverflowError(
                    f"scaling Sinkhorn overflowed at iteration {it} (reg={cfg.reg}); "
                    "use log_domain=True"
                )
    plan = u[:, None] * kernel * v[None, :]
    return SinkhornResult(plan, float((plan * C).sum()), it, converged, _residual(plan, a, b), False)


def _sinkhorn_log(C, a, b, cfg: SinkhornConfig, warm=None) -> SinkhornResult:
    reg = cfg.reg
    log_a, log_b = np.log(a), np.log(b)
    if warm is None:
        f, g = np.zeros_like(a), np.zeros_like(b)
    else:
        f, g = (np.array(x, dtype=np.float64) for x in warm)
    converged = False
    it = 0
    for it in range(1, cfg.maxiter + 1):
        lse_rows = _lse((g[None, :] - C) / reg, axis=1)
        with np.errstate(over="ignore"):
            row_err = np.abs(np.exp(f / reg + lse_rows) - a).sum()
        if row_err <= cfg.tol:
            converged = True
            break
        f = reg * (log_a - lse_rows)
        g = reg * (log_b - _lse((f[:, None] - C) / reg, axis=0))
    plan = np.exp((f[:, None] + g[None, :] - C) / reg)
    return SinkhornResult(plan, float((plan * C).sum()), it, converged, _residual(plan, a, b), True, f, g)


def sinkhorn(cost, a, b, config: Optional[SinkhornConfig] = None, warm=None) -> SinkhornResult:
    """Entropic transport plan between weight vectors ``a`` and ``b``.

    Stops once the row-marginal violation (L1) is at most ``config.tol``;
    column marginals are exact after every update. The log-domain solver
    is used when requested and always when ``reg < 0.1 * median(cost)``.
    ``warm`` passes log-domain potentials ``(f, g)`` from an earlier call.
    """
    cfg = config or SinkhornConfig()
    C = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Sinkhorn needs strictly positive marginals")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost must be finite")
    use_log = cfg.log_domain or cfg.reg < 0.1 * float(np.median(C))
    if use_log:
        return _sinkhorn_log(C, a, b, cfg, warm)
    return _sinkhorn_scaling(C, a, b, cfg)


@dataclass
class BaselineResult:
    support: np.ndarray
    objective: float
    iterations: int
    converged: bool
    total_s: float
    reg: float
    trace: list[dict] = field(default_factory=list, repr=False)
    inner_unconverged: int = 0

    @property
    def ms_per_iter(self) -> float:
        return 1e3 * self.total_s / max(self.iterations, 1)


def initial_support(M: int, dim: int, scale: float = 5.0, seed: int = 0) -> np.ndarray:
    """``M`` draws from ``N(0, scale * I)``, the same law as the normal candidates."""
    rng = seeding.stream(seed, seeding.BASELINE, 1)
    return rng.standard_normal((M, dim)) * math.sqrt(scale)


def free_support_barycenter(
    instance: ProblemInstance,
    M: Optional[int] = None,
    init: Optional[np.ndarray] = None,
    config: Optional[SinkhornConfig] = None,
    tol: float = 1e-4,
    maxiter: int = 1000,
    seed: int = 0,
    evaluate: bool = True,
) -> BaselineResult:
    """Fixed-point free-support barycenter with entropic plans.

    Each sweep solves one Sinkhorn problem per client from the uniform
    measure on the current support, then moves every support point to the
    ``lambda``-weighted average of its barycentric projections. Stops when
    the relative Frobenius change of the support drops below ``tol``.
    A support point that receives no mass is re-seeded at a random client
    particle.
    """
    cfg = config or SinkhornConfig(reg=0.1, tol=1e-6)
    M = instance.M if M is None else M
    X = initial_support(M, instance.dim, seed=seed) if init is None else np.array(init, dtype=np.float64)
    if X.shape != (M, instance.dim):
        raise ValueError(f"initial support must have shape ({M}, {instance.dim})")
    rng = seeding.stream(seed, seeding.BASELINE, 2)
    a = np.full(M, 1.0 / M)
    clouds = [c.cloud.points for c in instance.clients]
    lambdas = instance.weights
    warm: list = [None] * instance.N
    trace = []
    converged = False
    unconverged = 0
    start = time.perf_counter()
    it = 0
    for it in range(1, maxiter + 1):
        t0 = time.perf_counter()
        X_new = np.zeros_like(X)
        dead_any = np.zeros(M, dtype=bool)
        for s, Y in enumerate(clouds):
            C = pairwise_cost(X, Y, instance.p)
            res = sinkhorn(C, a, np.full(Y.shape[0], 1.0 / Y.shape[0]), cfg, warm[s])
            if res.f is not None:
                warm[s] = (res.f, res.g)
            unconverged += not res.converged
            mass = res.plan.sum(axis=1)
            dead = ~(mass > 0) | ~np.isfinite(mass)
            mass[dead] = 1.0
            proj = (res.plan / mass[:, None]) @ Y
            proj[dead] = 0.0
            X_new += lambdas[s] * proj
            dead_any |= dead
        for row in np.flatnonzero(dead_any):
            cloud = clouds[int(rng.integers(len(clouds)))]
            X_new[row] = cloud[int(rng.integers(cloud.shape[0]))]
        norm = np.linalg.norm(X)
        change = float(np.linalg.norm(X_new - X) / (norm if norm > 0 else 1.0))
        X = X_new
        trace.append({"iter": it, "change": change, "wall_ms": (time.perf_counter() - t0) * 1e3})
        if change < tol:
            converged = True
            break
    total = time.perf_counter() - start
    objective = support_objective(instance, X) if evaluate else float("nan")
    return BaselineResult(X, objective, it, converged, total, cfg.reg, trace, unconverged)
