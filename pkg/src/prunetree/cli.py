"""``prunetree`` command line: train, prune, baseline, report, flops."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import checkpoint
from .config import RunConfig, load_config
from .engine import EngineConfig, RunResult, run, summarize_trace, write_run_dir
from .errors import PruneTreeError, ValidationError
from .nn import count_flops, evaluate, init_model, train
from .report import build_report, format_delta, report_csv, report_text

log = logging.getLogger("prunetree")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, engine=replace(cfg.engine, seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    train_data, test_data = cfg.load_data()
    spec = cfg.network_spec(train_data)
    model = train(init_model(spec, cfg.engine.seed), train_data, cfg.train)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "baseline.prnet"
    checkpoint.save(model, ckpt)
    info = {
        "checkpoint": str(ckpt),
        "seed": cfg.engine.seed,
        "train_accuracy": evaluate(model, train_data),
        "test_accuracy": evaluate(model, test_data),
        "flops": count_flops(spec),
    }
    (out / "baseline.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"trained {ckpt}: train acc {info['train_accuracy']:.4f}, held-out acc {info['test_accuracy']:.4f}")
    return 0


def _load_checkpoint(args, cfg: RunConfig, train_data):
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required")
    model = checkpoint.load(args.checkpoint)
    expected = cfg.network_spec(train_data)
    if model.spec != expected:
        raise ValidationError(f"{args.checkpoint}: network does not match the configured architecture")
    return model


def _run_to_dir(model, engine: EngineConfig, train_data, test_data, out: Path) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)

    def save_iter(k, child, record):
        checkpoint.save(child, out / f"iter_{k}.prnet")

    result = run(model, engine, train_data, test_data, on_iteration=save_iter)
    write_run_dir(result, engine, out)
    return result


def _print_result(result: RunResult, out: Path) -> None:
    flops, delta = result.point(len(result.trace))
    compact = result.trace.compact
    pattern = summarize_trace(result.trace).pattern if compact else "-"
    print(f"{out}: trace {compact or '-'} ({pattern}); final FLOPs -{flops:.2f}%, delta {format_delta(delta)} pp")


def cmd_prune(args) -> int:
    cfg = _config(args)
    train_data, test_data = cfg.load_data()
    model = _load_checkpoint(args, cfg, train_data)
    out = Path(cfg.out_dir)
    result = _run_to_dir(model, cfg.engine, train_data, test_data, out)
    _print_result(result, out)
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    train_data, test_data = cfg.load_data()
    model = _load_checkpoint(args, cfg, train_data)
    out = Path(cfg.out_dir)
    rows = []
    for i in range(args.seeds):
        seed = cfg.engine.seed + i
        engine = replace(cfg.engine, mode="random", seed=seed)
        sub = out / f"seed_{seed}"
        result = _run_to_dir(model, engine, train_data, test_data, sub)
        _print_result(result, sub)
        bp_flops, bp_delta = result.point(result.best_positive_k)
        rows.append((seed, bp_flops, bp_delta))
    mean_flops = sum(r[1] for r in rows) / len(rows)
    mean_delta = sum(r[2] for r in rows) / len(rows)
    lines = ["seed,flop_reduction_pct,delta_accuracy_pp"]
    lines += [f"{s},{f!r},{d!r}" for s, f, d in rows]
    lines.append(f"mean,{mean_flops!r},{mean_delta!r}")
    (out / "aggregate.csv").write_text("\n".join(lines) + "\n")
    print(f"Random Walk mean over {len(rows)} seeds: FLOPs -{mean_flops:.2f}%, delta {format_delta(mean_delta)} pp")
    return 0


def cmd_report(args) -> int:
    rows = build_report(args.runs)
    text = report_text(rows)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(report_csv(rows))
    return 0


def cmd_flops(args) -> int:
    cfg = _config(args)
    train_data, _ = cfg.load_data()
    print(count_flops(cfg.network_spec(train_data)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunetree", description="CKA-guided layer/filter pruning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint_help=None):
        sp.add_argument("--config", help="key=value run configuration")
        sp.add_argument("--seed", type=int, help="overrides engine.seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        if checkpoint_help:
            sp.add_argument("--checkpoint", help=checkpoint_help)

    sp = sub.add_parser("train", help="train the unpruned baseline")
    common(sp, "where to write the checkpoint (default <out>/baseline.prnet)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="run CKA-guided pruning on a checkpoint")
    common(sp, "trained checkpoint to prune")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("baseline", help="Random Walk baseline over several seeds")
    common(sp, "trained checkpoint to prune")
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("report", help="comparison table from run directories")
    sp.add_argument("runs", nargs="*", help="run directories (or directories of seed_* runs)")
    sp.add_argument("--out", help="write the CSV table here")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("flops", help="print the FLOP count of the configured network")
    common(sp)
    sp.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "report" and not args.runs:
        parser.error("report needs at least one run directory")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except PruneTreeError as exc:
        print(f"prunetree: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
