"""Comparison tables (method, delta accuracy, FLOP reduction) built from run directories."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import PruneTreeError

METHOD_LABELS = {"cka": "CKA-guided", "random": "Random Walk"}


class ReportError(PruneTreeError):
    category = "report"
    exit_code = 7


@dataclass(frozen=True)
class ReportRow:
    method: str
    delta_pp: float
    flops_pct: float
    runs: int
    source: str


def best_positive_point(doc: dict) -> tuple[float, float]:
    """Largest FLOP reduction whose accuracy is not below the baseline, from the records alone."""
    base = doc["baseline_accuracy"]
    point = (0.0, 0.0)
    for r in doc["records"]:
        if r["accuracy_after"] >= base:
            point = (r["flop_reduction_pct"], 100.0 * (r["accuracy_after"] - base))
    return point


def read_trace(run_dir: Path) -> dict:
    path = run_dir / "trace.json"
    try:
        doc = json.loads(path.read_text())
        for key in ("mode", "baseline_accuracy", "records"):
            doc[key]
        for r in doc["records"]:
            float(r["accuracy_after"]), float(r["flop_reduction_pct"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ReportError(f"{run_dir}: unreadable or corrupt trace.json ({exc})") from exc
    return doc


def seed_dirs(run_dir: Path) -> list[Path]:
    return sorted(p for p in run_dir.iterdir() if p.is_dir() and (p / "trace.json").exists())


def rows_for(run_dir: str | Path) -> ReportRow:
    run_dir = Path(run_dir)
    if (run_dir / "trace.json").exists():
        docs = [read_trace(run_dir)]
    elif run_dir.is_dir() and seed_dirs(run_dir):
        docs = [read_trace(p) for p in seed_dirs(run_dir)]
    else:
        raise ReportError(f"{run_dir}: no trace.json found")
    points = [best_positive_point(d) for d in docs]
    modes = {d["mode"] for d in docs}
    method = " / ".join(METHOD_LABELS.get(m, m) for m in sorted(modes))
    flops = sum(p[0] for p in points) / len(points)
    delta = sum(p[1] for p in points) / len(points)
    return ReportRow(method, delta, flops, len(docs), str(run_dir))


def build_report(run_dirs) -> list[ReportRow]:
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    return sorted((rows_for(d) for d in run_dirs), key=lambda r: (r.flops_pct, r.method))


def format_delta(pp: float) -> str:
    """Signed delta for tables: ``(+) 0.19`` / ``(-) 0.42``."""
    value = round(pp, 2)
    sign = "(-)" if value < 0 else "(+)"
    return f"{sign} {abs(value):.2f}"


def report_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "delta_acc_pp", "flops_reduction_pct", "runs", "source"])
    for r in rows:
        w.writerow([r.method, f"{r.delta_pp:.4f}", f"{r.flops_pct:.4f}", r.runs, r.source])
    return buf.getvalue()


def report_text(rows: list[ReportRow]) -> str:
    """Fixed-width table; ``*`` marks the best delta and the best FLOP reduction."""
    best_delta = max(r.delta_pp for r in rows)
    best_flops = max(r.flops_pct for r in rows)
    lines = [f"{'Method':<24} {'Δ Acc. (pp)':>14} {'FLOPs (%)':>11}  runs"]
    for r in rows:
        d = format_delta(r.delta_pp) + ("*" if r.delta_pp == best_delta else " ")
        f = f"{r.flops_pct:.2f}" + ("*" if r.flops_pct == best_flops else " ")
        lines.append(f"{r.method:<24} {d:>14} {f:>11}  {r.runs}")
    return "\n".join(lines) + "\n"
