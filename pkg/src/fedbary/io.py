"""Result files: convergence traces, barycenter JSON and comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

TRACE_HEADER = ("iter", "dual_value", "support_size", "step_size", "theta0", "wall_ms")
COMPARE_HEADER = (
    "method",
    "regularization",
    "converged",
    "total_time_s",
    "iterations",
    "time_per_iter_ms",
    "exact_objective",
)


class ProvenanceError(ValueError):
    pass


def _num(x: Optional[float]) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def write_trace(path: str | Path, records: Iterable[Any]) -> None:
    """One row per round; ``dual_value`` is empty on rounds without a full evaluation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([r.iter, _num(r.dual_value), r.support_size, _num(r.step_size), _num(r.theta0), _num(r.wall_ms)])


def write_baseline_trace(path: str | Path, trace: Sequence[dict], objective: float) -> None:
    """Baseline sweeps in the same column layout; only the final row carries a value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for pos, row in enumerate(trace):
            last = pos == len(trace) - 1
            w.writerow([row["iter"], _num(objective) if last else "", "", "", "", _num(row["wall_ms"])])


def read_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def read_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def barycenter_payload(
    support: np.ndarray,
    objective: float,
    instance_hash: str,
    config: dict,
    gamma_bar: Optional[np.ndarray] = None,
    summary: Optional[dict] = None,
) -> dict:
    payload = {
        "support": np.asarray(support, dtype=np.float64).tolist(),
        "gamma_bar": None if gamma_bar is None else np.asarray(gamma_bar, dtype=np.float64).tolist(),
        "objective": float(objective),
        "instance_hash": instance_hash,
        "config": config,
    }
    if summary:
        payload["summary"] = summary
    return payload


def hyper_config(hyper: Any, **extra) -> dict:
    cfg = asdict(hyper)
    cfg.update(extra)
    return cfg


def check_same_instance(payloads: Sequence[dict], expected: Optional[str] = None) -> str:
    hashes = {p.get("instance_hash") for p in payloads}
    if expected is not None:
        hashes.add(expected)
    if len(hashes) != 1 or None in hashes:
        raise ProvenanceError(f"refusing to compare results from different instances: {sorted(map(str, hashes))}")
    return hashes.pop()


def write_compare(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in COMPARE_HEADER})


def format_table(rows: Sequence[dict]) -> str:
    cells = [list(COMPARE_HEADER)]
    for r in rows:
        line = []
        for k in COMPARE_HEADER:
            v = r.get(k, "")
            if isinstance(v, float):
                v = f"{v:.4f}" if k == "exact_objective" else f"{v:.2f}"
            line.append(str(v))
        cells.append(line)
    widths = [max(len(row[c]) for row in cells) for c in range(len(COMPARE_HEADER))]
    return "\n".join("  ".join(v.ljust(wd) for v, wd in zip(row, widths)).rstrip() for row in cells)


def write_points(path: str | Path, points: np.ndarray, label: Optional[Sequence[Any]] = None,
                 label_name: str = "client") -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [f"x{d}" for d in range(pts.shape[1])]
        w.writerow(([label_name] if label is not None else []) + head)
        for pos, row in enumerate(pts):
            w.writerow(([label[pos]] if label is not None else []) + [repr(float(x)) for x in row])
