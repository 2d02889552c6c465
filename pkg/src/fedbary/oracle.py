"""Exact discrete optimal transport and brute-force barycenter enumeration.

Marginals are converted to integer units over a common denominator and
the transportation problem is solved as an integer-supply flow problem:

* small totals are expanded into a unit assignment problem and solved with
  the shortest-augmenting-path assignment solver in scipy;
* larger totals go to the HiGHS dual simplex, whose optimal vertex is
  integral in units (the constraint matrix is totally unimodular) and is
  snapped back to exact integers.

Tolerances appear only when validating marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Any, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .measures import CostProfile, InstanceError, ProblemInstance, build_cost_profile, pairwise_cost

MARGINAL_TOL = 1e-9
MAX_DENOMINATOR = 10**6
ASSIGNMENT_MAX_UNITS = 2048
BRUTE_FORCE_BUDGET = 10**5
FALLBACK_DENOMINATOR = 2**32
MAX_COMMON_DENOMINATOR = 2**36


class MarginalMismatchError(ValueError):
    pass


class CombinatorialBudgetError(ValueError):
    def __init__(self, n_subsets: int, budget: int):
        super().__init__(
            f"brute force needs C(K, M) = {n_subsets} subset evaluations, budget is {budget}"
        )
        self.n_subsets = n_subsets


@dataclass(frozen=True)
class DiscreteMeasure:
    support: np.ndarray
    weights: np.ndarray

    def __init__(self, support: Any, weights: Any = None):
        pts = np.array(support, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InstanceError("nonempty", "measure support must be a nonempty point list")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise InstanceError("dimension", "one weight per support point required")
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise InstanceError("weight_sum", "measure weights must be nonnegative and sum to 1")
        object.__setattr__(self, "support", pts)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    value: float

    def marginal_residual(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(
            max(np.abs(self.plan.sum(axis=1) - a).max(), np.abs(self.plan.sum(axis=0) - b).max())
        )


def integer_units(weights: np.ndarray) -> tuple[np.ndarray, int]:
    """Express weights as integers over a common denominator.

    Each weight is replaced by its closest fraction with denominator at most
    ``MAX_DENOMINATOR``; the units are then rescaled to the least common
    denominator. When that representation is off by more than 1e-12 (the
    weights are not such rationals) a fixed denominator of 2**32 with
    largest-remainder rounding is used instead.
    """
    fracs = [Fraction(float(w)).limit_denominator(MAX_DENOMINATOR) for w in weights]
    exact = all(abs(float(f) - float(w)) <= 1e-12 for f, w in zip(fracs, weights))
    if exact and sum(fracs) == 1:
        den = 1
        for f in fracs:
            den = den * f.denominator // math.gcd(den, f.denominator)
        units = np.array([f.numerator * (den // f.denominator) for f in fracs], dtype=np.int64)
        return units, den
    return _fixed_units(weights)


def _fixed_units(weights: np.ndarray) -> tuple[np.ndarray, int]:
    den = FALLBACK_DENOMINATOR
    raw = np.asarray(weights, dtype=np.float64) / math.fsum(weights) * den
    units = np.floor(raw).astype(np.int64)
    short = den - int(units.sum())
    if short > 0:
        order = np.argsort(-(raw - units), kind="stable")
        units[order[:short]] += 1
    return units, den


def _solve_assignment(cost: np.ndarray, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    rows = np.repeat(np.arange(len(ua)), ua)
    cols = np.repeat(np.arange(len(ub)), ub)
    r, c = linear_sum_assignment(cost[np.ix_(rows, cols)])
    flow = np.zeros(cost.shape, dtype=np.int64)
    np.add.at(flow, (rows[r], cols[c]), 1)
    return flow


def _solve_simplex(cost: np.ndarray, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    n, m = cost.shape
    row_sum = sparse.kron(sparse.eye(n), np.ones((1, m)))
    col_sum = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([row_sum, col_sum]).tocsr()
    # the vertex is integral in units; dividing by the largest supply keeps HiGHS well scaled
    scale = float(max(ua.max(), ub.max()))
    b = np.concatenate([ua, ub]).astype(np.float64) / scale
    res = linprog(
        cost.ravel(),
        A_eq=A,
        b_eq=b,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    x = np.clip(res.x.reshape(n, m), 0.0, None) * scale
    flow = np.rint(x).astype(np.int64)
    if np.all(flow.sum(axis=1) == ua) and np.all(flow.sum(axis=0) == ub):
        return flow
    return x


def exact_transport(mu: Any, nu: Any, cost: Any) -> TransportPlan:
    """Optimal coupling of two discrete measures for a given cost matrix.

    ``mu`` and ``nu`` may be :class:`DiscreteMeasure` objects or plain weight
    vectors. Zero-weight atoms are dropped before solving and restored as
    zero rows/columns.

    Raises
    ------
    MarginalMismatchError
        If the two total masses differ by more than 1e-9.
    """
    a = np.asarray(mu.weights if isinstance(mu, DiscreteMeasure) else mu, dtype=np.float64)
    b = np.asarray(nu.weights if isinstance(nu, DiscreteMeasure) else nu, dtype=np.float64)
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != (a.size, b.size):
        raise InstanceError("dimension", f"cost shape {C.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(a < 0) or np.any(b < 0):
        raise MarginalMismatchError("marginal weights must be nonnegative")
    if abs(math.fsum(a) - math.fsum(b)) > MARGINAL_TOL:
        raise MarginalMismatchError(f"marginal masses differ: {math.fsum(a)!r} vs {math.fsum(b)!r}")

    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    ua, den_a = integer_units(a[ia])
    ub, den_b = integer_units(b[ib])
    den = den_a * den_b // math.gcd(den_a, den_b)
    if den > MAX_COMMON_DENOMINATOR:
        ua, den_a = _fixed_units(a[ia])
        ub, den_b = _fixed_units(b[ib])
        den = den_a
    ua = ua * (den // den_a)
    ub = ub * (den // den_b)
    sub = C[np.ix_(ia, ib)]

    if len(ib) == 1:
        flow = ua[:, None]
    elif len(ia) == 1:
        flow = ub[None, :]
    elif den <= ASSIGNMENT_MAX_UNITS:
        flow = _solve_assignment(sub, ua, ub)
    else:
        flow = _solve_simplex(sub, ua, ub)

    plan = np.zeros(C.shape)
    plan[np.ix_(ia, ib)] = flow / den
    # sum over integer flows first so the value is exact up to one rounding per cost
    value = math.fsum((sub * flow).ravel()) / den
    return TransportPlan(plan=plan, value=value)


def wasserstein_pp(cloud: Any, support: Any, weights: Any = None, p: float = 2.0) -> float:
    """``W_p^p`` between the uniform empirical measure of a cloud and a weighted support."""
    pts = getattr(cloud, "points", cloud)
    cost = pairwise_cost(pts, support, p)
    a = np.full(cost.shape[0], 1.0 / cost.shape[0])
    b = np.full(cost.shape[1], 1.0 / cost.shape[1]) if weights is None else np.asarray(weights, float)
    return exact_transport(a, b, cost).value


def objective_from_costs(
    costs: CostProfile | Sequence[np.ndarray], lambdas: Sequence[float], selected: Sequence[int]
) -> float:
    """Weighted sum of exact transport costs to the uniform measure on ``selected`` columns."""
    sel = np.asarray(sorted(set(int(k) for k in selected)), dtype=np.intp)
    if sel.size == 0:
        raise ValueError("selection must be nonempty")
    b = np.full(sel.size, 1.0 / sel.size)
    total = []
    for lam, C in zip(lambdas, costs):
        a = np.full(C.shape[0], 1.0 / C.shape[0])
        total.append(lam * exact_transport(a, b, C[:, sel]).value)
    return math.fsum(total)


def barycenter_objective(
    instance: ProblemInstance, selected: Sequence[int], costs: CostProfile | None = None
) -> float:
    """Weighted ``W_p^p`` objective of the uniform measure on the selected candidates."""
    if costs is None:
        costs = build_cost_profile(instance)
    return objective_from_costs(costs, instance.weights, selected)


def support_objective(instance: ProblemInstance, points: Any) -> float:
    """Same objective for an arbitrary uniform support (not necessarily candidates)."""
    pts = np.asarray(points, dtype=np.float64)
    costs = [pairwise_cost(c.cloud.points, pts, instance.p) for c in instance.clients]
    return objective_from_costs(costs, instance.weights, range(pts.shape[0]))


def brute_force_from_costs(
    costs: CostProfile | Sequence[np.ndarray],
    lambdas: Sequence[float],
    M: int,
    budget: int = BRUTE_FORCE_BUDGET,
) -> tuple[tuple[int, ...], float]:
    K = costs[0].shape[1]
    n_subsets = math.comb(K, M)
    if n_subsets > budget:
        raise CombinatorialBudgetError(n_subsets, budget)
    best: tuple[int, ...] | None = None
    best_value = math.inf
    # combinations() yields lexicographic order, so strict < keeps the smallest tied subset
    for subset in combinations(range(K), M):
        v = objective_from_costs(costs, lambdas, subset)
        if v < best_value:
            best, best_value = subset, v
    assert best is not None
    return best, best_value


def brute_force_barycenter(
    instance: ProblemInstance, budget: int = BRUTE_FORCE_BUDGET
) -> tuple[tuple[int, ...], float]:
    """Enumerate every size-M candidate subset and return the best one and its value."""
    return brute_force_from_costs(build_cost_profile(instance), instance.weights, instance.M, budget)
