"""CKA-guided pruning against the Random Walk baseline on one trained network.

Trains the configured baseline once, then runs both selection modes for several
engine seeds and writes one run directory per (mode, seed) plus a comparison table:

    python scripts/compare_random_walk.py --config configs/reference.cfg --seeds 3 --out runs/compare
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from prunetree import checkpoint
from prunetree.config import load_config
from prunetree.engine import run, write_run_dir
from prunetree.nn import evaluate, init_model, train
from prunetree.report import build_report, report_csv, report_text


def matched_accuracy(result, pct):
    for r in result.trace.records:
        if r.flop_reduction_pct >= pct:
            return r.accuracy_after
    return float("nan")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/reference.cfg")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--matched-pct", type=float, default=40.0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    cfg.validate()
    out = Path(args.out)
    train_data, test_data = cfg.load_data()
    t0 = time.perf_counter()
    model = train(init_model(cfg.network_spec(train_data), cfg.engine.seed), train_data, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out / "baseline.prnet")
    print(f"baseline: held-out accuracy {evaluate(model, test_data):.4f} ({time.perf_counter() - t0:.0f}s)")

    matched = {"cka": [], "random": []}
    for mode in ("cka", "random"):
        for i in range(args.seeds):
            engine = replace(cfg.engine, mode=mode, seed=cfg.engine.seed + i)
            t0 = time.perf_counter()
            result = run(model, engine, train_data, test_data)
            write_run_dir(result, engine, out / mode / f"seed_{engine.seed}")
            matched[mode].append(matched_accuracy(result, args.matched_pct))
            print(f"{mode:>6} seed {engine.seed}: {result.trace.compact} ({time.perf_counter() - t0:.0f}s)")

    rows = build_report([out / "cka", out / "random"])
    (out / "table.csv").write_text(report_csv(rows))
    print(report_text(rows), end="")
    for mode, accs in matched.items():
        print(f"{mode:>6}: mean held-out accuracy at >= {args.matched_pct:.0f}% FLOP reduction {100 * np.mean(accs):.2f}%")


if __name__ == "__main__":
    main()
