"""Greedy CKA-guided choice between layer and filter pruning, iterated K times."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from . import checkpoint
from .criteria import Criterion
from .data import Dataset
from .errors import PruningComplete, TrainingDiverged, ValidationError
from .nn import ModelState, TrainConfig, count_flops, derive_seed, evaluate, extract_representation, loss_value, train
from .similarity import LinearCKA, SimilarityMetric, cka_or_zero, metric_name
from .structures import DEFAULT_GROUP_SIZE, structure_to_dict
from .surgery import DEFAULT_TAU, Subnetwork, make_candidates

log = logging.getLogger(__name__)

LAYER, FILTER = "L", "F"
BRANCH_LAYER, BRANCH_FILTER, BRANCH_WINNER, COIN_STREAM, PROBE_STREAM = 0, 1, 2, 3, 4
CSV_COLUMNS = ["k", "chosen", "cka_layer", "cka_filter", "flops_after", "flop_reduction_pct", "accuracy_after"]


@dataclass(frozen=True)
class EngineConfig:
    K: int = 6
    epsilon: float = 0.0
    recovery_epochs: int = 10
    post_select_epochs: int = 12
    mode: Literal["cka", "random"] = "cka"
    metric: SimilarityMetric = LinearCKA()
    criterion: Criterion = "kl"
    seed: int = 0
    stop_on_negative_delta: bool = False
    # fine-tune at the rate the baseline schedule ends on
    finetune: TrainConfig = TrainConfig(epochs=0, batch_size=64, learning_rate=0.001)
    probe_size: int = 256
    group_size: int = DEFAULT_GROUP_SIZE
    tau: float = DEFAULT_TAU
    threads: int | None = None

    def validate(self) -> None:
        if self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if self.recovery_epochs < 0 or self.post_select_epochs < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.mode not in ("cka", "random"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.probe_size < 4:
            raise ValidationError("probe_size must be at least 4")
        if not 0 <= self.tau < 1:
            raise ValidationError("tau must lie in [0, 1)")

    @property
    def winner_epochs(self) -> int:
        """Post-selection budget with the recovery epochs already spent discounted."""
        return max(self.post_select_epochs - self.recovery_epochs, 0)

    def worker_threads(self) -> int:
        if self.threads is not None:
            return max(1, self.threads)
        return max(1, int(os.environ.get("PRUNETREE_THREADS", "1")))


def select_branch(cka_layer: float | None, cka_filter: float | None, epsilon: float = 0.0) -> str:
    """Layer wins iff cka_layer + epsilon >= cka_filter; a missing side loses."""
    if cka_layer is None and cka_filter is None:
        raise PruningComplete("no candidate to choose from")
    if cka_filter is None:
        return LAYER
    if cka_layer is None:
        return FILTER
    return LAYER if cka_layer + epsilon >= cka_filter else FILTER


@dataclass
class IterationRecord:
    index: int
    chosen: str
    cka_layer: float | None
    cka_filter: float | None
    flops_after: int
    flop_reduction_pct: float
    accuracy_after: float
    wall_time: float = 0.0
    epsilon: float = 0.0
    delta_layer: int | None = None
    delta_filter: int | None = None
    target_delta: int | None = None
    layer_exhausted: bool = False
    filter_exhausted: bool = False
    disqualified: list[str] = field(default_factory=list)
    removed: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def selection_sound(self) -> bool:
        if self.cka_layer is None or self.cka_filter is None:
            return True
        layer_ok = self.cka_layer + self.epsilon >= self.cka_filter
        return layer_ok if self.chosen == LAYER else not layer_ok


@dataclass
class DecisionTrace:
    records: list[IterationRecord] = field(default_factory=list)

    @property
    def compact(self) -> str:
        return "".join(r.chosen for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "DecisionTrace":
        return cls([IterationRecord(**r) for r in rows])


@dataclass
class RunResult:
    final: ModelState
    trace: DecisionTrace
    baseline_accuracy: float
    original_flops: int
    best_positive: ModelState
    best_positive_k: int  # 0 means the unpruned input model
    mode: str
    seed: int
    completed: bool = False

    def point(self, k: int) -> tuple[float, float]:
        """(flop_reduction_pct, delta_accuracy_pp) after iteration ``k``."""
        if k == 0:
            return 0.0, 0.0
        r = self.trace.records[k - 1]
        return r.flop_reduction_pct, 100.0 * (r.accuracy_after - self.baseline_accuracy)


# ---------------------------------------------------------------------------
# single step


def _recover(sub: Subnetwork, cfg: EngineConfig, k: int, branch: int, data: Dataset) -> ModelState:
    model = sub.model.copy(rng_seed=derive_seed(cfg.seed, k, branch))
    return train(model, data, replace(cfg.finetune, epochs=cfg.recovery_epochs))


def _recover_all(jobs: dict[str, tuple[Subnetwork, int]], cfg: EngineConfig, k: int, data: Dataset):
    """Recovery fine-tunes keyed by branch; a diverged candidate maps to its exception."""

    def run(item):
        name, (sub, branch) = item
        try:
            return name, _recover(sub, cfg, k, branch, data)
        except TrainingDiverged as exc:
            return name, exc

    threads = min(cfg.worker_threads(), len(jobs))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(pool.map(run, jobs.items()))
    return dict(map(run, jobs.items()))


def prune_step(
    parent: ModelState,
    cfg: EngineConfig,
    probe: np.ndarray,
    train_data: Dataset,
    eval_data: Dataset | None = None,
    k: int = 1,
    original_flops: int | None = None,
    flop_quantum: int | None = None,
    coin: str | None = None,
) -> tuple[ModelState, IterationRecord]:
    """One decision: build both candidates, recover them, keep one, fine-tune it."""
    t0 = time.perf_counter()
    eval_data = train_data if eval_data is None else eval_data
    original_flops = original_flops or count_flops(parent.spec)
    cands = make_candidates(parent, cfg.criterion, probe, cfg.group_size, cfg.tau, flop_quantum)
    if cands.layer is None and cands.filter is None:
        raise PruningComplete(f"iteration {k}: no layer or filter candidate left")
    subs = {LAYER: cands.layer, FILTER: cands.filter}
    branch_ids = {LAYER: BRANCH_LAYER, FILTER: BRANCH_FILTER}
    available = [b for b in (LAYER, FILTER) if subs[b] is not None]
    disqualified: list[str] = []
    cka_vals: dict[str, float | None] = {LAYER: None, FILTER: None}

    if cfg.mode == "random":
        if coin not in (LAYER, FILTER):
            raise ValidationError("random-walk steps need a coin outcome of 'L' or 'F'")
        order = [coin] + [b for b in (LAYER, FILTER) if b != coin]
        chosen, recovered = None, None
        for b in order:
            if subs[b] is None:
                continue
            out = _recover_all({b: (subs[b], branch_ids[b])}, cfg, k, train_data)[b]
            if isinstance(out, TrainingDiverged):
                disqualified.append(b)
                continue
            chosen, recovered = b, out
            break
        if chosen is None:
            raise TrainingDiverged(parent.epoch_counter)
    else:
        outs = _recover_all({b: (subs[b], branch_ids[b]) for b in available}, cfg, k, train_data)
        ok = {}
        for b, out in outs.items():
            if isinstance(out, TrainingDiverged):
                disqualified.append(b)
            else:
                ok[b] = out
        if not ok:
            raise TrainingDiverged(parent.epoch_counter)
        r_parent = extract_representation(parent, probe)
        for b, m in ok.items():
            cka_vals[b] = cka_or_zero(r_parent, extract_representation(m, probe), cfg.metric)
        chosen = select_branch(cka_vals[LAYER], cka_vals[FILTER], cfg.epsilon)
        recovered = ok[chosen]

    child = recovered
    if cfg.winner_epochs:
        child = train(
            child.copy(rng_seed=derive_seed(cfg.seed, k, BRANCH_WINNER)),
            train_data,
            replace(cfg.finetune, epochs=cfg.winner_epochs),
        )
    flops_after = count_flops(child.spec)
    record = IterationRecord(
        index=k,
        chosen=chosen,
        cka_layer=cka_vals[LAYER],
        cka_filter=cka_vals[FILTER],
        flops_after=flops_after,
        flop_reduction_pct=100.0 * (1.0 - flops_after / original_flops),
        accuracy_after=evaluate(child, eval_data),
        wall_time=time.perf_counter() - t0,
        epsilon=cfg.epsilon,
        delta_layer=cands.layer.flop_delta if cands.layer else None,
        delta_filter=cands.filter.flop_delta if cands.filter else None,
        target_delta=cands.target_delta,
        layer_exhausted=cands.layer_exhausted,
        filter_exhausted=cands.filter_exhausted,
        disqualified=disqualified,
        removed=[structure_to_dict(s) for s in subs[chosen].removed],
        notes=list(cands.notes),
    )
    return child, record


# ---------------------------------------------------------------------------
# full run


def run(
    model: ModelState,
    cfg: EngineConfig,
    train_data: Dataset,
    eval_data: Dataset | None = None,
    on_iteration: Callable[[int, ModelState, IterationRecord], None] | None = None,
) -> RunResult:
    """Iterate ``prune_step``; each selected child becomes the next parent."""
    cfg.validate()
    eval_data = train_data if eval_data is None else eval_data
    probe = train_data.sample_probe(cfg.probe_size, derive_seed(cfg.seed, PROBE_STREAM))
    baseline = evaluate(model, eval_data)
    chance = 1.0 / train_data.num_classes
    if baseline <= chance + 1e-9 and not math.isfinite(loss_value(model, train_data.images[:256], train_data.labels[:256])):
        warnings.warn("input model looks untrained (chance accuracy, non-finite loss)", RuntimeWarning, stacklevel=2)
    original_flops = count_flops(model.spec)
    coins = np.random.default_rng(derive_seed(cfg.seed, COIN_STREAM))
    trace = DecisionTrace()
    parent, quantum = model, None
    best, best_k = model, 0
    completed = False
    for k in range(1, cfg.K + 1):
        # one flip per iteration whether or not a branch is exhausted
        coin = (LAYER if coins.random() < 0.5 else FILTER) if cfg.mode == "random" else None
        try:
            child, record = prune_step(parent, cfg, probe, train_data, eval_data, k, original_flops, quantum, coin)
        except PruningComplete as exc:
            log.info("%s", exc)
            completed = True
            break
        if record.delta_layer is not None:
            quantum = record.delta_layer
        trace.records.append(record)
        log.info(
            "k=%d chose %s cka_l=%s cka_f=%s flops=-%.2f%% acc=%.4f",
            k, record.chosen, record.cka_layer, record.cka_filter, record.flop_reduction_pct, record.accuracy_after,
        )
        if on_iteration is not None:
            on_iteration(k, child, record)
        if record.accuracy_after >= baseline:
            best, best_k = child, k
        parent = child
        if cfg.stop_on_negative_delta and record.accuracy_after < baseline:
            break
    return RunResult(parent, trace, baseline, original_flops, best, best_k, cfg.mode, cfg.seed, completed)


def run_random_walk(model: ModelState, cfg: EngineConfig, train_data: Dataset, eval_data: Dataset | None = None, **kw):
    """Same pipeline with the similarity comparison replaced by a fair coin."""
    return run(model, replace(cfg, mode="random"), train_data, eval_data, **kw)


# ---------------------------------------------------------------------------
# trace summaries

_SUPERSCRIPT = str.maketrans("0123456789", "⁰¹²³⁴⁵⁶⁷⁸⁹")


@dataclass(frozen=True)
class TraceSummary:
    runs: tuple[tuple[str, int], ...]
    pattern: str
    layers: int
    filters: int
    ratio: str
    flops: tuple[int, ...]


def run_length(compact: str) -> list[tuple[str, int]]:
    runs: list[tuple[str, int]] = []
    for c in compact:
        if runs and runs[-1][0] == c:
            runs[-1] = (c, runs[-1][1] + 1)
        else:
            runs.append((c, 1))
    return runs


def summarize_trace(trace: DecisionTrace | str) -> TraceSummary:
    """Run-length pattern such as ``L³,F²,L`` plus layer/filter counts."""
    compact = trace if isinstance(trace, str) else trace.compact
    if not compact:
        raise ValidationError("cannot summarise an empty trace")
    if set(compact) - {LAYER, FILTER}:
        raise ValidationError(f"trace may only contain L and F: {compact!r}")
    runs = run_length(compact)
    pattern = ",".join(c if n == 1 else c + str(n).translate(_SUPERSCRIPT) for c, n in runs)
    nl, nf = compact.count(LAYER), compact.count(FILTER)
    flops = tuple(r.flops_after for r in trace.records) if isinstance(trace, DecisionTrace) else ()
    return TraceSummary(tuple(runs), pattern, nl, nf, f"{nl}/{nf}", flops)


# ---------------------------------------------------------------------------
# run directory


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def iterations_csv(trace: DecisionTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in trace.records:
        w.writerow([_fmt(r.index), r.chosen, _fmt(r.cka_layer), _fmt(r.cka_filter), _fmt(r.flops_after),
                    _fmt(r.flop_reduction_pct), _fmt(r.accuracy_after)])
    return buf.getvalue()


def engine_config_dict(cfg: EngineConfig) -> dict:
    d = asdict(cfg)
    d["metric"] = metric_name(cfg.metric)
    d["finetune"]["lr_schedule"] = [list(x) for x in cfg.finetune.lr_schedule]
    return d


def trace_document(result: RunResult, cfg: EngineConfig) -> dict:
    bp_flops, bp_delta = result.point(result.best_positive_k)
    fin_flops, fin_delta = result.point(len(result.trace))
    return {
        "mode": result.mode,
        "seed": result.seed,
        "baseline_accuracy": result.baseline_accuracy,
        "original_flops": result.original_flops,
        "compact": result.trace.compact,
        "pattern": summarize_trace(result.trace).pattern if len(result.trace) else "",
        "completed": result.completed,
        "config": engine_config_dict(cfg),
        "best_positive": {"k": result.best_positive_k, "flop_reduction_pct": bp_flops, "delta_accuracy_pp": bp_delta},
        "final": {"k": len(result.trace), "flop_reduction_pct": fin_flops, "delta_accuracy_pp": fin_delta},
        "records": result.trace.to_list(),
    }


def write_run_dir(result: RunResult, cfg: EngineConfig, out_dir: str | Path) -> Path:
    """trace.json, trace.txt, iterations.csv, final.prnet and best_positive.prnet."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.json").write_text(json.dumps(trace_document(result, cfg), indent=2) + "\n")
    (out / "trace.txt").write_text(result.trace.compact + "\n")
    (out / "iterations.csv").write_text(iterations_csv(result.trace))
    checkpoint.save(result.final, out / "final.prnet")
    checkpoint.save(result.best_positive, out / "best_positive.prnet")
    return out
