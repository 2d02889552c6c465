"""Federated dual subgradient method for the candidate-selection barycenter.

The mixed-integer problem selects ``M`` of ``K`` candidates (``gamma``) and
couples every client's particles to them (``beta``). Dualizing the
per-particle mass balance (multipliers ``theta[s][i]``, held by client s)
and the cardinality constraint (``theta0``, held by the coordinator) makes
the inner minimization separable per candidate with a closed form:

* each client reports ``T[s, k] = max_i(theta[s][i] - w_s d[s][i, k]) - mean(theta[s])``;
* the coordinator selects ``gamma_k = 1`` iff ``sum_s T[s, k] > theta0``;
* the dual value is ``sum_k min(0, theta0 - sum_s T[s, k]) - M theta0``.

Both sides then take momentum subgradient ascent steps with step size
``alpha0 / sqrt(j + 1)``. Functions in the first half of the module are
pure; :class:`LocalDevice` and :class:`Coordinator` hold the two halves of
the state, and :func:`run` drives them in-process.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .measures import CostProfile, ProblemInstance, build_cost_profile
from .oracle import barycenter_objective

Batch = Optional[np.ndarray]  # sorted candidate indices; None means all K


class NonFiniteError(RuntimeError):
    def __init__(self, round_: int, what: str):
        super().__init__(f"non-finite {what} in round {round_}")
        self.round = round_


@dataclass
class HyperParams:
    alpha0: float = 1.0
    kappa1: float = 0.9
    kappa2: float = 0.9
    epsilon: float = 1e-4
    relative: bool = True
    maxiter: int = 5000
    batch_size: Optional[int] = None
    recovery_window: int = 50
    support_band: float = 0.10
    seed: int = 0
    recovery_mode: str = "top"

    def validate(self, K: int) -> None:
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not (0 <= self.kappa1 < 1 and 0 <= self.kappa2 < 1):
            raise ValueError("momentum factors must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.maxiter < 1:
            raise ValueError("maxiter must be at least 1")
        if self.batch_size is not None and not 1 <= self.batch_size <= K:
            raise ValueError(f"batch size must lie in [1, {K}]")
        if self.recovery_window < 1:
            raise ValueError("recovery window must be at least 1")
        if self.recovery_mode not in ("top", "sample"):
            raise ValueError("recovery mode must be 'top' or 'sample'")

    def batch(self, K: int) -> int:
        return K if self.batch_size is None else self.batch_size


@dataclass
class DualState:
    theta0: float
    theta: list[np.ndarray]
    m0: float
    m: list[np.ndarray]

    @classmethod
    def zeros(cls, sizes: Sequence[int], theta0: float = 0.0) -> "DualState":
        return cls(
            theta0=float(theta0),
            theta=[np.zeros(n) for n in sizes],
            m0=0.0,
            m=[np.zeros(n) for n in sizes],
        )


@dataclass(frozen=True)
class ClientReport:
    """Per-candidate aggregates of one client for one round.

    ``t`` always has length K; entries outside ``batch`` are NaN (absent).
    """

    client_id: int
    round: int
    t: np.ndarray
    batch: Batch = None


@dataclass(frozen=True)
class Selection:
    gamma: np.ndarray  # int8 flags, length K

    @property
    def size(self) -> int:
        return int(self.gamma.sum())


@dataclass(frozen=True)
class LocalCoupling:
    """Chosen particle per selected candidate; -1 where ``gamma_k = 0``."""

    assignment: np.ndarray


# ---------------------------------------------------------------- pure pieces


def step_size(alpha0: float, j: int) -> float:
    return alpha0 / math.sqrt(j + 1)


def _scores(cost_block: np.ndarray, w: float, theta: np.ndarray, batch: Batch) -> np.ndarray:
    block = cost_block if batch is None else cost_block[:, batch]
    return theta[:, None] - w * block


def client_report(
    cost_block: np.ndarray,
    w: float,
    theta: np.ndarray,
    batch: Batch = None,
    client_id: int = 0,
    round_: int = 0,
    scores: Optional[np.ndarray] = None,
) -> ClientReport:
    """Compute ``T[s, k]`` for the candidates in ``batch``.

    ``scores`` may pass a precomputed ``theta - w * d`` block for the batch.
    """
    K = cost_block.shape[1]
    if scores is None:
        scores = _scores(cost_block, w, theta, batch)
    t1 = theta.mean()
    t2 = scores.max(axis=0)
    if batch is None:
        t = t2 - t1
    else:
        t = np.full(K, np.nan)
        t[batch] = t2 - t1
    return ClientReport(client_id=client_id, round=round_, t=t, batch=batch)


def aggregate(reports: Sequence[ClientReport]) -> np.ndarray:
    """Sum reports in client-id order, independent of arrival order."""
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = np.zeros_like(ordered[0].t)
    for r in ordered:
        total = total + r.t
    return total


def select_support(
    reports: Sequence[ClientReport] | np.ndarray,
    theta0: float,
    batch: Batch = None,
    previous: Optional[Selection] = None,
) -> Selection:
    """``gamma_k = 1`` iff the aggregated report strictly exceeds ``theta0``.

    Candidates outside ``batch`` keep their value from ``previous``.
    """
    total = reports if isinstance(reports, np.ndarray) else aggregate(reports)
    if batch is None:
        gamma = (total > theta0).astype(np.int8)
    else:
        gamma = np.zeros(total.shape[0], np.int8) if previous is None else previous.gamma.copy()
        gamma[batch] = total[batch] > theta0
    return Selection(gamma)


def dual_value(reports: Sequence[ClientReport] | np.ndarray, theta0: float, M: int) -> float:
    """Closed-form dual function from full reports."""
    total = reports if isinstance(reports, np.ndarray) else aggregate(reports)
    return float(np.minimum(0.0, theta0 - total).sum() - M * theta0)


def local_couplings(
    cost_block: np.ndarray,
    w: float,
    theta: np.ndarray,
    gamma: Selection | np.ndarray,
    rng: np.random.Generator,
    batch: Batch = None,
    scores: Optional[np.ndarray] = None,
) -> LocalCoupling:
    """Best particle for every selected candidate, ties broken uniformly at random.

    Only candidates in ``batch`` are considered; ``scores`` may pass the
    ``theta - w * d`` block already computed for the report.
    """
    g = gamma.gamma if isinstance(gamma, Selection) else np.asarray(gamma)
    K = cost_block.shape[1]
    cols = np.arange(K) if batch is None else np.asarray(batch)
    if scores is None:
        scores = _scores(cost_block, w, theta, batch)
    chosen = np.flatnonzero(g[cols] == 1)
    assignment = np.full(K, -1, dtype=np.int64)
    if chosen.size == 0:
        return LocalCoupling(assignment)
    sub = scores[:, chosen]
    best = sub.argmax(axis=0)
    top = sub.max(axis=0)
    is_top = sub == top
    n_top = is_top.sum(axis=0)
    tied = np.flatnonzero(n_top > 1)
    if tied.size:
        picks = rng.integers(0, n_top[tied])
        for col, r in zip(tied, picks):
            best[col] = np.flatnonzero(is_top[:, col])[r]
    assignment[cols[chosen]] = best
    return LocalCoupling(assignment)


def global_subgradient(gamma: Selection | np.ndarray, M: int, batch: Batch = None, K: Optional[int] = None) -> float:
    g = gamma.gamma if isinstance(gamma, Selection) else np.asarray(gamma)
    if batch is None:
        return float(g.sum() - M)
    K = g.shape[0] if K is None else K
    return float((K / len(batch)) * g[batch].sum() - M)


def local_subgradient(
    coupling: LocalCoupling,
    gamma: Selection | np.ndarray,
    n: int,
    batch: Batch = None,
    K: Optional[int] = None,
) -> np.ndarray:
    """``sum_k (gamma_k / n - beta[i, k] gamma_k)``, restricted and rescaled for batches."""
    g = gamma.gamma if isinstance(gamma, Selection) else np.asarray(gamma)
    assign = coupling.assignment
    if batch is not None:
        g = g[batch]
        assign = assign[batch]
    hits = assign[(g == 1) & (assign >= 0)]
    counts = np.bincount(hits, minlength=n).astype(np.float64)
    sub = g.sum() / n - counts
    if batch is None:
        return sub
    K = coupling.assignment.shape[0] if K is None else K
    return (K / len(batch)) * sub


def momentum(m, g, kappa: float):
    return (1 - kappa) * g + kappa * m


def step(
    state: DualState, g0: float, gs: Sequence[np.ndarray], j: int, hyper: HyperParams
) -> DualState:
    """One ascent step on every multiplier; returns a new state."""
    alpha = step_size(hyper.alpha0, j)
    m0 = momentum(state.m0, g0, hyper.kappa1)
    ms = [momentum(m, g, hyper.kappa2) for m, g in zip(state.m, gs)]
    return DualState(
        theta0=state.theta0 + alpha * m0,
        theta=[t + alpha * m for t, m in zip(state.theta, ms)],
        m0=m0,
        m=ms,
    )


# ------------------------------------------------------------- stateful roles


class LocalDevice:
    """Client-side state: private costs, local multipliers and momenta.

    Nothing here is ever sent except the :class:`ClientReport` vector.
    """

    def __init__(self, client_id: int, cost_block: np.ndarray, w: float, alpha0: float, kappa2: float, seed: int):
        self.client_id = client_id
        self.cost = cost_block
        self.w = w
        self.alpha0 = alpha0
        self.kappa2 = kappa2
        self.theta = np.zeros(cost_block.shape[0])
        self.m = np.zeros(cost_block.shape[0])
        self.rng = seeding.stream(seed, seeding.TIES, client_id)
        self._scores: Optional[np.ndarray] = None
        self._round: Optional[int] = None

    @property
    def K(self) -> int:
        return self.cost.shape[1]

    def report(self, round_: int, batch: Batch = None) -> ClientReport:
        self._scores = _scores(self.cost, self.w, self.theta, batch)
        self._round = round_
        return client_report(
            self.cost, self.w, self.theta, batch, self.client_id, round_, scores=self._scores
        )

    def update(self, round_: int, gamma: Selection | np.ndarray, batch: Batch = None) -> None:
        if self._round != round_:
            raise RuntimeError(f"client {self.client_id}: update for round {round_} without a report")
        coupling = local_couplings(
            self.cost, self.w, self.theta, gamma, self.rng, batch, scores=self._scores
        )
        g = local_subgradient(coupling, gamma, self.theta.shape[0], batch, self.K)
        self.m = momentum(self.m, g, self.kappa2)
        self.theta = self.theta + step_size(self.alpha0, round_) * self.m
        self._scores = None


@dataclass
class RoundRecord:
    iter: int
    gamma: np.ndarray
    dual_value: Optional[float]
    support_size: int
    step_size: float
    theta0: float
    wall_ms: float = 0.0


@dataclass
class RoundOutcome:
    selection: Selection
    dual_value: Optional[float]
    done: bool
    reason: Optional[str] = None


class Coordinator:
    """Coordinator-side state: ``theta0``, its momentum and the round history.

    Works only with report vectors, ``theta0``, ``M`` and ``K``.
    """

    def __init__(self, K: int, M: int, hyper: HyperParams, theta0: float = 0.0):
        hyper.validate(K)
        self.K = K
        self.M = M
        self.hyper = hyper
        self.theta0 = float(theta0)
        self.m0 = 0.0
        self.B = hyper.batch(K)
        self.full_every = math.ceil(K / self.B)
        self.rng = seeding.stream(hyper.seed, seeding.BATCH)
        self.selection = Selection(np.zeros(K, np.int8))
        self.history: list[RoundRecord] = []
        self._last_full: Optional[float] = None

    def batch_for(self, j: int) -> Batch:
        if self.B == self.K or j % self.full_every == 0:
            return None
        return np.sort(self.rng.choice(self.K, size=self.B, replace=False))

    def process(self, j: int, reports: Sequence[ClientReport], batch: Batch = None) -> RoundOutcome:
        for r in reports:
            if r.t.shape[0] != self.K:
                raise ValueError(f"report from client {r.client_id} has length {r.t.shape[0]}, expected {self.K}")
        total = aggregate(reports)
        selection = select_support(total, self.theta0, batch, self.selection)
        value = None
        done, reason = False, None
        if batch is None:
            value = dual_value(total, self.theta0, self.M)
            if not math.isfinite(value):
                raise NonFiniteError(j, "dual value")
            done = self._stop_test(value, selection.size)
            if done:
                reason = "converged"
        alpha = step_size(self.hyper.alpha0, j)
        self.history.append(
            RoundRecord(j, selection.gamma, value, selection.size, alpha, self.theta0)
        )
        self.selection = selection
        if not done and j >= self.hyper.maxiter - 1:
            done, reason = True, "maxiter"
        if not done:
            g0 = global_subgradient(selection, self.M, batch, self.K)
            self.m0 = momentum(self.m0, g0, self.hyper.kappa1)
            self.theta0 = self.theta0 + alpha * self.m0
            if not math.isfinite(self.theta0):
                raise NonFiniteError(j, "theta0")
        return RoundOutcome(selection, value, done, reason)

    def _stop_test(self, value: float, size: int) -> bool:
        prev, self._last_full = self._last_full, value
        if prev is None:
            return False
        tol = self.hyper.epsilon * abs(prev) if self.hyper.relative else self.hyper.epsilon
        in_band = abs(size - self.M) <= self.hyper.support_band * self.M
        return abs(value - prev) <= tol and in_band


# ------------------------------------------------------------ primal recovery


@dataclass
class PrimalRecovery:
    gamma_bar: np.ndarray
    support: np.ndarray
    objective: Optional[float]


def recover_primal(
    history: Sequence[RoundRecord],
    window: int,
    instance: Optional[ProblemInstance] = None,
    costs: Optional[CostProfile] = None,
    M: Optional[int] = None,
    mode: str = "top",
    rng: Optional[np.random.Generator] = None,
) -> PrimalRecovery:
    """Step-size weighted average of the selections from the best rounds.

    Takes the ``window`` evaluated rounds with the highest dual value,
    averages their ``gamma`` with weights proportional to the step size and
    keeps the ``M`` candidates with the largest average (ties by index).
    With ``mode="sample"`` the support is drawn instead, each candidate with
    probability proportional to its average. The objective is evaluated
    exactly when an instance is given.
    """
    evaluated = [r for r in history if r.dual_value is not None]
    if len(evaluated) < window:
        raise ValueError(f"recovery window {window} exceeds the {len(evaluated)} evaluated rounds")
    best = sorted(evaluated, key=lambda r: -r.dual_value)[:window]
    alphas = np.array([r.step_size for r in best])
    weights = alphas / alphas.sum()
    gamma_bar = np.zeros(best[0].gamma.shape[0])
    for w, r in zip(weights, best):
        gamma_bar += w * r.gamma
    if M is None:
        if instance is None:
            raise ValueError("need M or an instance")
        M = instance.M

    if mode == "sample" and np.count_nonzero(gamma_bar) > M:
        rng = rng if rng is not None else np.random.default_rng()
        support = rng.choice(gamma_bar.shape[0], size=M, replace=False, p=gamma_bar / gamma_bar.sum())
    else:
        support = np.argsort(-gamma_bar, kind="stable")[:M]
    support = np.sort(support)

    objective = None
    if instance is not None:
        objective = barycenter_objective(instance, support, costs)
    return PrimalRecovery(gamma_bar, support, objective)


# ----------------------------------------------------------------- the driver


@dataclass
class SolveResult:
    state: Optional[DualState]
    history: list[RoundRecord]
    best_dual: float
    gamma_bar: np.ndarray
    support: np.ndarray
    support_points: np.ndarray
    objective: float
    iterations: int
    converged: bool
    stop_reason: str
    hyper: HyperParams = field(repr=False, default_factory=HyperParams)

    @property
    def dual_values(self) -> list[Optional[float]]:
        return [r.dual_value for r in self.history]

    @property
    def wall_ms(self) -> np.ndarray:
        return np.array([r.wall_ms for r in self.history])

    @property
    def ms_per_iter(self) -> float:
        return float(self.wall_ms.mean())


def finish(
    instance: ProblemInstance,
    costs: CostProfile,
    coordinator: Coordinator,
    stop_reason: str,
    hyper: HyperParams,
    state: Optional[DualState] = None,
) -> SolveResult:
    """Primal recovery and bookkeeping shared by in-process and networked runs."""
    history = coordinator.history
    n_eval = sum(r.dual_value is not None for r in history)
    rec = recover_primal(
        history,
        min(hyper.recovery_window, n_eval),
        instance,
        costs,
        mode=hyper.recovery_mode,
        rng=seeding.stream(hyper.seed, seeding.RECOVERY),
    )
    return SolveResult(
        state=state,
        history=history,
        best_dual=max(r.dual_value for r in history if r.dual_value is not None),
        gamma_bar=rec.gamma_bar,
        support=rec.support,
        support_points=instance.candidates.points[rec.support],
        objective=rec.objective,
        iterations=len(history),
        converged=stop_reason == "converged",
        stop_reason=stop_reason,
        hyper=hyper,
    )


def run(
    instance: ProblemInstance,
    hyper: Optional[HyperParams] = None,
    reporter: Optional[Callable[[RoundRecord], None]] = None,
    initial: Optional[DualState] = None,
    costs: Optional[CostProfile] = None,
) -> SolveResult:
    """Run the dual subgradient method with all clients in this process.

    ``reporter`` is called with every :class:`RoundRecord` as soon as the
    round completes. ``initial`` overrides the all-zero starting point.
    """
    hyper = hyper or HyperParams()
    costs = costs or build_cost_profile(instance)
    coord = Coordinator(instance.K, instance.M, hyper, 0.0 if initial is None else initial.theta0)
    devices = [
        LocalDevice(s, costs[s], instance.local_weight(s), hyper.alpha0, hyper.kappa2, hyper.seed)
        for s in range(instance.N)
    ]
    if initial is not None:
        coord.m0 = initial.m0
        for d, th, m in zip(devices, initial.theta, initial.m):
            d.theta = np.array(th, dtype=np.float64)
            d.m = np.array(m, dtype=np.float64)

    reason = "maxiter"
    for j in range(hyper.maxiter):
        start = time.perf_counter()
        batch = coord.batch_for(j)
        reports = [d.report(j, batch) for d in devices]
        outcome = coord.process(j, reports, batch)
        if not outcome.done:
            for d in devices:
                d.update(j, outcome.selection, batch)
        record = coord.history[-1]
        record.wall_ms = (time.perf_counter() - start) * 1e3
        if reporter is not None:
            reporter(record)
        if outcome.done:
            reason = outcome.reason or reason
            break

    state = DualState(
        theta0=coord.theta0,
        theta=[d.theta for d in devices],
        m0=coord.m0,
        m=[d.m for d in devices],
    )
    return finish(instance, costs, coord, reason, hyper, state)
