"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also printed when output is captured.
"""

import copy
import time
from itertools import combinations

import numpy as np
import pytest

from fedbary.baseline import SinkhornConfig, free_support_barycenter
from fedbary.datagen import SKEWED_WEIGHTS, paper_preset_5
from fedbary.dual import (
    HyperParams,
    client_report,
    dual_value,
    global_subgradient,
    local_couplings,
    local_subgradient,
    run,
    select_support,
)
from fedbary.federation import privacy_audit, run_federated
from fedbary.measures import build_cost_profile, pairwise_cost
from fedbary.oracle import brute_force_barycenter, brute_force_from_costs, exact_transport

from _oracles import lagrangian_min, monotone_rearrangement
from conftest import desk3_instance, random_tiny_costs, tiny

DESK_SEED = 42
DESK_HYPER = HyperParams(alpha0=3e-4, seed=DESK_SEED)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def reports_at(blocks, w, thetas, batch=None):
    return [client_report(b, ws, th, batch, client_id=s) for s, (b, ws, th) in enumerate(zip(blocks, w, thetas))]


def random_theta(rng, blocks, w):
    scale = max(float(np.max(b)) for b in blocks) * max(w)
    return [rng.normal(scale=scale, size=b.shape[0]) for b in blocks], float(rng.normal(scale=len(blocks) * scale))


# ------------------------------------------------------------------ 1


def test_criterion_01_golden_tiny_instances(verdict):
    checks = {}
    start = time.perf_counter()
    t2 = tiny([(1.0, [0, 2])], [0, 1, 2], M=2)
    d = build_cost_profile(t2)[0]
    theta, theta0 = np.zeros(2), -0.25
    reps = [client_report(d, t2.local_weight(0), theta)]
    sel = select_support(reps, theta0)
    coupling = local_couplings(d, t2.local_weight(0), theta, sel, np.random.default_rng(0))
    g = local_subgradient(coupling, sel, 2)
    checks["T2 dual 0"] = dual_value(reps, theta0, 2) == 0.0
    checks["T2 subgradients 0"] = global_subgradient(sel, 2) == 0.0 and g.tolist() == [0.0, 0.0]
    checks["T2 brute force"] = brute_force_barycenter(t2) == ((0, 2), 0.0)
    t2_time = time.perf_counter() - start

    start = time.perf_counter()
    t3 = tiny([(0.5, [0]), (0.5, [2])], [0, 1, 2], M=1)
    r3 = run(t3, HyperParams(maxiter=2000))
    checks["T3 best dual"] = abs(r3.best_dual - 1.0) <= 1e-3
    checks["T3 support"] = r3.support.tolist() == [1] and r3.objective == 1.0
    t3_time = time.perf_counter() - start

    start = time.perf_counter()
    t1 = tiny([(1.0, [0, 2])], [0, 1, 2], M=1)
    r1 = run(t1, HyperParams(maxiter=2000))
    bf = brute_force_barycenter(t1)
    checks["T1 brute force primal"] = bf == ((1,), 1.0)
    checks["T1 weak duality"] = r1.best_dual <= 1.0 and r1.objective >= r1.best_dual
    t1_time = time.perf_counter() - start
    checks["runtime"] = max(t1_time, t2_time, t3_time) < 1.0

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(1, ok, f"T3 best dual {r3.best_dual:.6f}; T1 best dual {r1.best_dual:.3g}, "
                   f"recovered objective {r1.objective:.3g}, brute force {bf[1]:.3g} "
                   f"(gap {bf[1] - r1.best_dual:.3g}); failed: {failed or 'none'}")
    assert ok, failed


# ------------------------------------------------------------------ 2


def test_criterion_02_weak_duality_sweep(verdict):
    rng = np.random.default_rng(2002)
    start = time.perf_counter()
    violations, worst = 0, -np.inf
    for _ in range(200):
        blocks, lam, M = random_tiny_costs(rng, max_clients=3, max_particles=4, max_K=7, max_M=3)
        w = [l / M for l in lam]
        _, best = brute_force_from_costs(blocks, lam, M)
        for _ in range(50):
            thetas, theta0 = random_theta(rng, blocks, w)
            value = dual_value(reports_at(blocks, w, thetas), theta0, M)
            worst = max(worst, value - best)
            violations += value > best + 1e-9
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30
    verdict(2, ok, f"{violations} violations in 10000 evaluations, max(dual - primal) {worst:.3g}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_03_supergradient_inequality(verdict):
    rng = np.random.default_rng(3003)
    violations, pairs, worst = 0, 0, -np.inf
    for _ in range(20):
        blocks, lam, M = random_tiny_costs(rng)
        w = [l / M for l in lam]
        for _ in range(5):
            thetas, theta0 = random_theta(rng, blocks, w)
            thetas2, theta02 = random_theta(rng, blocks, w)
            reps = reports_at(blocks, w, thetas)
            sel = select_support(reps, theta0)
            g0 = global_subgradient(sel, M)
            gs = [local_subgradient(local_couplings(b, ws, th, sel, rng), sel, th.shape[0])
                  for b, ws, th in zip(blocks, w, thetas)]
            lhs = dual_value(reports_at(blocks, w, thetas2), theta02, M)
            rhs = dual_value(reps, theta0, M) + g0 * (theta02 - theta0) + sum(
                float(g @ (b - a)) for g, a, b in zip(gs, thetas, thetas2))
            worst = max(worst, lhs - rhs)
            violations += lhs > rhs + 1e-9
            pairs += 1
    ok = violations == 0 and pairs == 100
    verdict(3, ok, f"{violations} violations in {pairs} pairs, max excess {worst:.3g}")
    assert ok


# ------------------------------------------------------------------ 4


def test_criterion_04_closed_form_vs_enumeration(verdict):
    rng = np.random.default_rng(4004)
    worst = 0.0
    for _ in range(50):
        blocks, lam, M = random_tiny_costs(rng)
        w = [l / M for l in lam]
        thetas, theta0 = random_theta(rng, blocks, w)
        closed = dual_value(reports_at(blocks, w, thetas), theta0, M)
        worst = max(worst, abs(closed - lagrangian_min(blocks, w, thetas, theta0, M)))
    ok = worst <= 1e-12
    verdict(4, ok, f"max |closed form - enumeration| = {worst:.3g} over 50 instances")
    assert ok


# ------------------------------------------------------------------ 5


def test_criterion_05_stochastic_unbiasedness(verdict):
    rng = np.random.default_rng(5005)
    K, B, M = 6, 2, 2
    blocks = [rng.uniform(0, 10, size=(3, K)), rng.uniform(0, 10, size=(4, K)), rng.uniform(0, 10, size=(2, K))]
    w = [l / M for l in (0.2, 0.5, 0.3)]
    thetas, theta0 = random_theta(rng, blocks, w)
    theta0 = -abs(theta0)
    sel = select_support(reports_at(blocks, w, thetas), theta0)
    g0 = global_subgradient(sel, M)
    gs = [local_subgradient(local_couplings(b, ws, th, sel, rng), sel, th.shape[0])
          for b, ws, th in zip(blocks, w, thetas)]
    batches = [np.array(c) for c in combinations(range(K), B)]
    g0_avg = 0.0
    gs_avg = [np.zeros_like(g) for g in gs]
    for batch in batches:
        bsel = select_support(reports_at(blocks, w, thetas, batch), theta0, batch)
        g0_avg += global_subgradient(bsel, M, batch, K) / len(batches)
        for i, (b, ws, th) in enumerate(zip(blocks, w, thetas)):
            c = local_couplings(b, ws, th, bsel, rng, batch)
            gs_avg[i] += local_subgradient(c, bsel, th.shape[0], batch, K) / len(batches)
    err = max([abs(g0_avg - g0)] + [float(np.abs(a - g).max()) for a, g in zip(gs_avg, gs)])
    ok = len(batches) == 15 and err <= 1e-12
    verdict(5, ok, f"{len(batches)} batches, max deviation from deterministic subgradient {err:.3g}")
    assert ok


# ------------------------------------------------------------------ 6


def test_criterion_06_transport_oracle_1d(verdict):
    rng = np.random.default_rng(6006)
    worst_value, worst_residual = 0.0, 0.0
    for _ in range(100):
        n, m = rng.integers(1, 9, size=2)
        x, y = rng.normal(scale=3.0, size=n), rng.normal(scale=3.0, size=m)
        a = rng.integers(1, 20, size=n).astype(float)
        b = rng.integers(1, 20, size=m).astype(float)
        a, b = a / a.sum(), b / b.sum()
        p = float(rng.choice([1.0, 2.0, 3.0]))
        plan = exact_transport(a, b, pairwise_cost(x, y, p))
        worst_value = max(worst_value, abs(plan.value - monotone_rearrangement(x, a, y, b, p)))
        worst_residual = max(worst_residual, plan.marginal_residual(a, b))
    ok = worst_value <= 1e-9 and worst_residual <= 1e-9
    verdict(6, ok, f"max value error {worst_value:.3g}, max marginal residual {worst_residual:.3g}")
    assert ok


# ------------------------------------------------------------------ 7 and 8


@pytest.fixture(scope="module")
def desk():
    inst = paper_preset_5(SKEWED_WEIGHTS, n=500, seed=DESK_SEED, K=1000, M=250, candidates="normal", scale=5.0)
    dual = run_federated(inst, DESK_HYPER, "inprocess")
    breg = {
        reg: free_support_barycenter(inst, config=SinkhornConfig(reg=reg, tol=1e-6), seed=DESK_SEED)
        for reg in (0.1, 0.5)
    }
    return inst, dual, breg


def test_criterion_07_desk_scale(desk, verdict):
    inst, dual, breg = desk
    res = dual.result
    lo, hi = 0.9 * inst.M, 1.1 * inst.M
    a = res.converged and lo <= res.support.size <= hi and lo <= res.history[-1].support_size <= hi
    gap = (res.objective - breg[0.1].objective) / breg[0.1].objective
    b = abs(gap) <= 0.05
    c = breg[0.5].objective > breg[0.1].objective
    ratio = breg[0.1].ms_per_iter / res.ms_per_iter
    d = ratio >= 5.0
    ok = a and b and c and d
    verdict(
        7,
        ok,
        f"(a) {'ok' if a else 'FAIL'}: {res.stop_reason} at round {res.iterations}, "
        f"final selection {res.history[-1].support_size}, recovered {res.support.size}; "
        f"(b) {'ok' if b else 'FAIL'}: dual objective {res.objective:.4f} vs reg-0.1 {breg[0.1].objective:.4f} "
        f"({100 * gap:+.2f}%, best dual bound {res.best_dual:.4f}); "
        f"(c) {'ok' if c else 'FAIL'}: reg-0.5 {breg[0.5].objective:.4f} > reg-0.1; "
        f"(d) {'ok' if d else 'FAIL'}: {res.ms_per_iter:.1f} vs {breg[0.1].ms_per_iter:.1f} ms/iter ({ratio:.1f}x)",
    )
    assert a, "stopping rule / support band"
    assert c, "baseline ordering"
    assert d, "per-iteration time ratio"
    assert b, f"dual objective {100 * gap:+.2f}% from the reg-0.1 baseline, bar is 5%"


def test_criterion_08_privacy_audit_tcp(desk, verdict):
    inst, inproc, _ = desk
    tcp = run_federated(inst, DESK_HYPER, "tcp")
    audit = privacy_audit(tcp.log, inst)
    same = [(r.gamma.tolist(), r.theta0) for r in tcp.result.history] == [
        (r.gamma.tolist(), r.theta0) for r in inproc.result.history
    ]
    sizes = set(audit.reals_per_report.values())
    ups = tcp.log.upstream_bytes()
    per_real = max(ups.values()) / inst.K

    bad = copy.deepcopy(tcp.log)
    target = max(i for i, r in enumerate(bad.records) if r.dir == "up")
    bad.records[target].msg["particles"] = inst.clients[0].cloud.points[:2].tolist()
    negative = privacy_audit(bad, inst)
    caught = (not negative.passed) and negative.failures[0][0] == target

    ok = audit.passed and sizes == {inst.K} and caught and same
    verdict(8, ok, f"{audit.summary()}; max {per_real:.1f} bytes per candidate per report; "
                   f"injected field caught at message {negative.failures[0][0] if negative.failures else None} "
                   f"(expected {target}); TCP trajectory equals in-process: {same}")
    assert ok


# ------------------------------------------------------------------ 9


def test_criterion_09_determinism_and_transports(verdict):
    t3 = tiny([(0.5, [0]), (0.5, [2])], [0, 1, 2], M=1)
    desk = desk3_instance(n=500, K=1000, M=250, seed=DESK_SEED)
    hyper = HyperParams(alpha0=3e-4, maxiter=150, seed=DESK_SEED)

    def full(res):
        return [(r.iter, r.gamma.tobytes(), r.dual_value, r.support_size, r.step_size, r.theta0) for r in res.history]

    def traj(res):
        return [(r.gamma.tobytes(), r.theta0) for r in res.history]

    repeat_ok = full(run(desk, hyper)) == full(run(desk, hyper))
    batch = HyperParams(alpha0=3e-4, maxiter=60, batch_size=100, seed=DESK_SEED)
    repeat_batch_ok = full(run(desk, batch)) == full(run(desk, batch))
    t3_ok = traj(run_federated(t3, HyperParams(maxiter=2000)).result) == traj(
        run_federated(t3, HyperParams(maxiter=2000), "tcp").result)
    desk_ok = traj(run_federated(desk, hyper).result) == traj(run_federated(desk, hyper, "tcp").result)
    ok = repeat_ok and repeat_batch_ok and t3_ok and desk_ok
    verdict(9, ok, f"repeat runs identical: {repeat_ok} (full), {repeat_batch_ok} (batch); "
                   f"in-process == TCP: {t3_ok} (T3), {desk_ok} (3-client desk)")
    assert ok


# ------------------------------------------------------------------ 10


def test_criterion_10_shift_cancellation(verdict):
    # integer costs, dyadic weights and multipliers, power-of-two cloud sizes:
    # every intermediate value is exactly representable, so equality is exact
    rng = np.random.default_rng(1010)
    checked, mismatches = 0, 0
    for _ in range(20):
        N = int(rng.integers(1, 4))
        K = int(rng.integers(2, 8))
        blocks = [rng.integers(0, 11, size=(int(rng.choice([1, 2, 4])), K)).astype(float) for _ in range(N)]
        w = [0.25, 0.125, 0.0625][:N]
        thetas = [rng.integers(-64, 65, size=b.shape[0]) / 8.0 for b in blocks]
        theta0 = float(rng.integers(-40, 1)) / 8.0
        base = reports_at(blocks, w, thetas)
        for c in (-5.0, 1.0, 100.0):
            s = int(rng.integers(N))
            shifted = [th + c if i == s else th for i, th in enumerate(thetas)]
            after = reports_at(blocks, w, shifted)
            same_report = np.array_equal(base[s].t, after[s].t)
            same_gamma = np.array_equal(select_support(base, theta0).gamma, select_support(after, theta0).gamma)
            mismatches += not (same_report and same_gamma)
            checked += 1
    ok = mismatches == 0
    verdict(10, ok, f"{mismatches} changed reports or selections in {checked} shifts")
    assert ok
