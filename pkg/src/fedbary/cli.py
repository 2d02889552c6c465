"""Command-line interface: ``fedbary gen|solve|baseline|compare|oracle|audit``.

Exit codes: 0 success (converged), 2 iteration cap reached, 3 input error,
4 protocol error, 1 anything else (including a failed audit).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .baseline import DEFAULT_REGS, SinkhornConfig, free_support_barycenter
from .datagen import SKEWED_WEIGHTS, paper_preset_5, random_gmm_preset
from .dual import HyperParams, NonFiniteError
from .federation import (
    DEFAULT_TIMEOUT,
    LISTEN_ENV,
    ProtocolError,
    RoundLog,
    client_tcp,
    coordinate_tcp,
    privacy_audit,
    run_federated,
)
from .measures import InstanceError, load_instance, save_instance
from .oracle import CombinatorialBudgetError, barycenter_objective, brute_force_barycenter, wasserstein_pp

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_MAXITER = 2
EXIT_INPUT = 3
EXIT_PROTOCOL = 4
SEED_ENV = "FEDBARY_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _candidates(text: str) -> tuple[str, int, float]:
    parts = text.split(":")
    try:
        mode = parts[0]
        K = int(parts[1]) if len(parts) > 1 else 1000
        scale = float(parts[2]) if len(parts) > 2 else 5.0
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MODE[:K[:SCALE]], got {text!r}") from None
    if mode not in ("normal", "grid", "pooled-sample") or len(parts) > 3:
        raise argparse.ArgumentTypeError(f"expected MODE[:K[:SCALE]] with MODE normal|grid|pooled-sample, got {text!r}")
    return mode, K, scale


# ---------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    mode, K, scale = args.candidates
    if args.preset == "paper5":
        inst = paper_preset_5(args.weights or SKEWED_WEIGHTS, args.n, seed, K, args.M, mode, scale,
                              args.mixture_clients)
    else:
        if args.weights:
            raise UsageError("--weights applies to the paper5 preset only")
        inst = random_gmm_preset(10, args.n, seed, K, args.M, mode, scale)
    save_instance(inst, args.out)
    print(f"wrote {args.out}: K={inst.K} N={inst.N} M={inst.M} dim={inst.dim} hash={inst.content_hash()[:12]}")
    return EXIT_OK


# -------------------------------------------------------------------- solve


def _hyper(args) -> HyperParams:
    return HyperParams(
        alpha0=args.alpha0,
        kappa1=args.kappa1,
        kappa2=args.kappa2,
        epsilon=args.epsilon,
        relative=not args.absolute,
        maxiter=args.maxiter,
        batch_size=args.batch,
        recovery_window=args.window,
        support_band=args.band,
        seed=_default_seed() if args.seed is None else args.seed,
        recovery_mode=args.recovery,
    )


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    hyper = _hyper(args)
    hyper.validate(inst.K)
    if args.role == "client":
        if args.connect is None or args.client_id is None:
            raise UsageError("--role client needs --connect HOST:PORT and --client-id")
        if not 0 <= args.client_id < inst.N:
            raise UsageError(f"--client-id must be in [0, {inst.N})")
        client_tcp(inst, args.client_id, args.connect, args.timeout)
        return EXIT_OK
    if args.role == "coordinator":
        run = coordinate_tcp(inst, hyper, args.listen, args.timeout)
        transport = "tcp"
    else:
        run = run_federated(inst, hyper, args.transport, args.timeout, theta0=args.theta0)
        transport = args.transport
    res = run.result
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = io.hyper_config(hyper, role=args.role, transport=transport, instance=str(args.instance))
    summary = {
        "method": "dual",
        "regularization": "",
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "total_time_s": float(res.wall_ms.sum() / 1e3),
        "iterations": res.iterations,
        "time_per_iter_ms": res.ms_per_iter,
        "exact_objective": res.objective,
        "best_dual": res.best_dual,
        "support_size": int(res.support.size),
    }
    digest = inst.content_hash()
    io.write_trace(out / "trace.csv", res.history)
    payload = io.barycenter_payload(res.support_points, res.objective, digest, config, res.gamma_bar, summary)
    payload["support_indices"] = res.support.tolist()
    io.write_json(out / "barycenter.json", payload)
    run.log.save(out / "roundlog.jsonl")
    io.write_json(out / "run.json", {"instance_hash": digest, "config": config, "summary": summary})
    print(
        f"{res.stop_reason} after {res.iterations} rounds: best dual {res.best_dual:.6g}, "
        f"objective {res.objective:.6g}, support {res.support.size}, {res.ms_per_iter:.3g} ms/round"
    )
    return EXIT_OK if res.converged else EXIT_MAXITER


# ----------------------------------------------------------------- baseline


def cmd_baseline(args) -> int:
    inst = load_instance(args.instance)
    seed = _default_seed() if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = inst.content_hash()
    all_converged = True
    for reg in args.reg:
        cfg = SinkhornConfig(reg=reg, tol=args.inner_tol, maxiter=args.inner_maxiter, log_domain=args.log_domain)
        res = free_support_barycenter(inst, config=cfg, tol=args.tol, maxiter=args.maxiter, seed=seed)
        all_converged &= res.converged
        config = {
            "reg": reg,
            "tol": args.tol,
            "maxiter": args.maxiter,
            "inner_tol": args.inner_tol,
            "inner_maxiter": args.inner_maxiter,
            "log_domain": args.log_domain,
            "seed": seed,
            "instance": str(args.instance),
        }
        summary = {
            "method": "bregman",
            "regularization": reg,
            "converged": res.converged,
            "total_time_s": res.total_s,
            "iterations": res.iterations,
            "time_per_iter_ms": res.ms_per_iter,
            "exact_objective": res.objective,
            "inner_unconverged": res.inner_unconverged,
        }
        stem = f"baseline_reg{reg:g}"
        io.write_json(out / f"{stem}.json", io.barycenter_payload(res.support, res.objective, digest, config, None, summary))
        io.write_baseline_trace(out / f"{stem}_trace.csv", res.trace, res.objective)
        flag = "converged" if res.converged else "NOT converged"
        print(
            f"reg {reg:g}: {flag} after {res.iterations} sweeps, objective {res.objective:.6g}, "
            f"{res.ms_per_iter:.3g} ms/sweep"
        )
    return EXIT_OK if all_converged else EXIT_MAXITER


# ------------------------------------------------------------------ compare


def cmd_compare(args) -> int:
    inst = load_instance(args.instance)
    payloads = [io.read_json(p) for p in args.results]
    io.check_same_instance(payloads, inst.content_hash())
    rows = []
    for path, p in zip(args.results, payloads):
        summary = dict(p.get("summary") or {})
        summary.setdefault("method", Path(path).stem)
        summary["exact_objective"] = p["objective"]
        rows.append(summary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_compare(out / "compare.csv", rows)
    labels = [s for s, c in enumerate(inst.clients) for _ in range(len(c.cloud))]
    io.write_points(out / "clients.csv", np.concatenate([c.cloud.points for c in inst.clients]), labels)
    io.write_points(out / "candidates.csv", inst.candidates.points)
    for path, p in zip(args.results, payloads):
        io.write_points(out / f"support_{Path(path).stem}.csv", np.array(p["support"]))
    print(io.format_table(rows))
    return EXIT_OK


# ------------------------------------------------------------------- oracle


def cmd_oracle(args) -> int:
    inst = load_instance(args.instance)
    report: dict = {"instance_hash": inst.content_hash()}
    if args.support is not None:
        idx = args.support
        if any(not 0 <= k < inst.K for k in idx) or len(set(idx)) != len(idx):
            raise UsageError(f"--support needs distinct candidate indices in [0, {inst.K})")
        report["support"] = idx
        report["objective"] = barycenter_objective(inst, idx)
    if args.brute_force:
        best, value = brute_force_barycenter(inst, budget=args.budget)
        report["brute_force"] = {"support": list(best), "objective": value}
    if args.wasserstein is not None:
        payload = io.read_json(args.wasserstein)
        points = np.array(payload["support"], dtype=np.float64)
        dists = [wasserstein_pp(c.cloud.points, points, p=inst.p) for c in inst.clients]
        report["wasserstein_pp"] = dists
        report["weighted_objective"] = float(np.dot(inst.weights, dists))
    if len(report) == 1:
        raise UsageError("oracle needs at least one of --support, --brute-force, --wasserstein")
    print(json.dumps(report))
    return EXIT_OK


# -------------------------------------------------------------------- audit


def cmd_audit(args) -> int:
    inst = load_instance(args.instance)
    result = privacy_audit(RoundLog.load(args.log), inst)
    print(result.summary())
    for idx, why in result.failures[: args.show]:
        print(f"  message {idx}: {why}")
    return EXIT_OK if result.passed else EXIT_FAILED


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedbary", description="Federated Wasserstein barycenters by dual decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic instance")
    g.add_argument("--preset", choices=("paper5", "gmm10"), default="paper5")
    g.add_argument("--weights", type=_floats, default=None, help="client weights, comma separated")
    g.add_argument("--n", type=int, default=500, help="particles per client")
    g.add_argument("--candidates", type=_candidates, default=("normal", 1000, 5.0), help="MODE:K:SCALE")
    g.add_argument("--M", type=int, required=True, help="barycenter support size")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--mixture-clients", action="store_true", help="every client samples the whole mixture")
    g.add_argument("--out", default="instance.json")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run the dual method")
    s.add_argument("instance")
    s.add_argument("--out", default="out")
    s.add_argument("--role", choices=("all-in-one", "coordinator", "client"), default="all-in-one")
    s.add_argument("--transport", choices=("inprocess", "tcp"), default="inprocess")
    s.add_argument("--listen", default=None, help=f"coordinator address (default ${LISTEN_ENV} or 127.0.0.1:7001)")
    s.add_argument("--connect", default=None, help="coordinator address for --role client")
    s.add_argument("--client-id", type=int, default=None)
    s.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    s.add_argument("--alpha0", type=float, default=1.0)
    s.add_argument("--kappa1", type=float, default=0.9)
    s.add_argument("--kappa2", type=float, default=0.9)
    s.add_argument("--epsilon", type=float, default=1e-4)
    s.add_argument("--absolute", action="store_true", help="absolute instead of relative dual-change test")
    s.add_argument("--maxiter", type=int, default=5000)
    s.add_argument("--batch", type=int, default=None, help="candidates per stochastic round (default K)")
    s.add_argument("--window", type=int, default=50, help="rounds averaged by primal recovery")
    s.add_argument("--band", type=float, default=0.10, help="support-size band around M for stopping")
    s.add_argument("--recovery", choices=("top", "sample"), default="top")
    s.add_argument("--theta0", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("baseline", help="entropic free-support barycenter")
    b.add_argument("instance")
    b.add_argument("--out", default="out")
    b.add_argument("--reg", type=_floats, default=list(DEFAULT_REGS))
    b.add_argument("--maxiter", type=int, default=1000, help="fixed-point sweeps")
    b.add_argument("--tol", type=float, default=1e-4, help="relative support change to stop")
    b.add_argument("--inner-maxiter", type=int, default=1000, help="Sinkhorn iterations per sweep")
    b.add_argument("--inner-tol", type=float, default=1e-6)
    b.add_argument("--log-domain", action="store_true")
    b.add_argument("--seed", type=int, default=None)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", help="tabulate results for one instance")
    c.add_argument("instance")
    c.add_argument("results", nargs="+", help="barycenter JSON files")
    c.add_argument("--out", default="compare")
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="exact transport values")
    o.add_argument("instance")
    o.add_argument("--support", type=_ints, default=None, help="candidate indices, comma separated")
    o.add_argument("--brute-force", action="store_true")
    o.add_argument("--budget", type=int, default=10**5, help="maximum subsets to enumerate")
    o.add_argument("--wasserstein", default=None, help="barycenter JSON whose support is scored")
    o.set_defaults(func=cmd_oracle)

    a = sub.add_parser("audit", help="check a round log for disclosures")
    a.add_argument("log")
    a.add_argument("--instance", required=True)
    a.add_argument("--show", type=int, default=10)
    a.set_defaults(func=cmd_audit)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InstanceError, CombinatorialBudgetError, FileNotFoundError, json.JSONDecodeError,
            io.ProvenanceError, ValueError) as exc:
        print(f"fedbary: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ProtocolError, ConnectionError, TimeoutError) as exc:
        print(f"fedbary: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NonFiniteError as exc:
        print(f"fedbary: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
