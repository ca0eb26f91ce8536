"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale pruning criteria (7 to 10) share one trained reference network and
a set of K=6 runs built once per session; the slow fixture takes roughly 20 minutes
on one CPU core.
"""
import time

import numpy as np
import pytest
import torch

from prunetree.criteria import kl_divergence, kl_score, rank_structures
from prunetree.data import synthetic_blobs
from prunetree.engine import EngineConfig, iterations_csv, run, run_random_walk
from prunetree.nn import (
    ConvSpec,
    NetworkSpec,
    TrainConfig,
    block_flops,
    count_flops,
    dense_spec,
    forward,
    init_model,
    resnet_spec,
    train,
)
from prunetree.similarity import cka, hsic
from prunetree.structures import FilterGroup, LayerBlock, filter_structures, remove_block, remove_filters, zero_filters

from oracles import hsic_literal
from test_criteria import silence_block
from test_gradients import check_instance, micro_instance

SEEDS = (0, 1, 2)
MATCHED_PCT = 40.0


_capture = None


@pytest.fixture(autouse=True)
def _uncaptured(request):
    global _capture
    _capture = request.config.pluginmanager.getplugin("capturemanager")
    yield


def report(n, ok, detail, elapsed=None):
    t = f" [{elapsed:.2f}s]" if elapsed is not None else ""
    with _capture.global_and_fixture_disabled():
        print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}{t}", flush=True)
    assert ok, f"criterion {n}: {detail}"


# -- fast criteria -----------------------------------------------------------------


def test_c01_hsic_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 9))
        a, b = rng.normal(size=(m, rng.integers(1, 6))), rng.normal(size=(m, rng.integers(1, 6)))
        k, l = a @ a.T, b @ b.T
        worst = max(worst, abs(hsic(k, l) - hsic_literal(k, l)))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 1.0, f"max |hsic - literal| = {worst:.1e} over 100 pairs", elapsed)


def test_c02_cka_invariants():
    t0 = time.perf_counter()
    errs = {"self": 0.0, "rotation": 0.0, "scaling": 0.0, "symmetry": 0.0}
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        m, d1, d2 = int(rng.integers(4, 20)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        a, b = rng.normal(size=(m, d1)), rng.normal(size=(m, d2))
        q, _ = np.linalg.qr(rng.normal(size=(d1, d1)))
        base = cka(a, b)
        errs["self"] = max(errs["self"], abs(cka(a, a) - 1.0))
        errs["rotation"] = max(errs["rotation"], abs(cka(a @ q, b) - base))
        errs["scaling"] = max(errs["scaling"], abs(cka(rng.uniform(0.1, 10) * a, b) - base))
        errs["symmetry"] = max(errs["symmetry"], abs(cka(b, a) - base))
    elapsed = time.perf_counter() - t0
    ok = errs["self"] <= 1e-9 and errs["symmetry"] <= 1e-9 and errs["rotation"] <= 1e-6 and errs["scaling"] <= 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(2, ok and elapsed < 5.0, f"200 cases: {detail}", elapsed)


def test_c03_gradient_check():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model, x, y = micro_instance(seed, dense_only=seed % 5 == 4)
        worst = max(worst, max(check_instance(model, x, y, seed=seed).values()))
    elapsed = time.perf_counter() - t0
    report(3, worst <= 1e-3 and elapsed < 30.0, f"worst relative error {worst:.1e} on 20 instances", elapsed)


def test_c04_surgery_function_preservation():
    t0 = time.perf_counter()
    model = init_model(resnet_spec(num_classes=4), 3)
    x = torch.as_tensor(np.random.default_rng(32).uniform(0, 1, (32, 3, 16, 16)).astype(np.float32))

    def gap(a, b):
        return float(torch.max(torch.abs(forward(a, x)[0] - forward(b, x)[0])))

    silent = silence_block(model, 1, 2)
    block_gap = gap(remove_block(silent, LayerBlock(1, 2)), silent)
    dead_gap = 0.0
    for g in (FilterGroup(0, 1, 1, (0, 1, 2, 3)), FilterGroup(2, 0, 2, (4, 5, 6, 7)), FilterGroup(1, 2, 1, (8, 9, 10, 11))):
        dead = zero_filters(model, g)
        dead_gap = max(dead_gap, gap(remove_filters(dead, g), dead))
    agree = max(gap(zero_filters(model, g), remove_filters(model, g)) for g in filter_structures(model.spec, 4))
    elapsed = time.perf_counter() - t0
    ok = max(block_gap, dead_gap, agree) <= 1e-5 and elapsed < 10.0
    report(4, ok, f"block {block_gap:.1e}, dead filters {dead_gap:.1e}, zero-vs-structural {agree:.1e}", elapsed)


def reference_flops_by_hand() -> int:
    # stem 3->8 at 16x16 (conv, affine, relu)
    total = 2 * 8 * 3 * 9 * 256 + 2 * 8 * 256
    # stage 0: three identity blocks, 8 channels at 16x16
    total += 3 * (2 * (2 * 8 * 8 * 9 * 256) + 2 * 8 * 256 + 3 * 8 * 256)
    for cin, c, hw in ((8, 16, 64), (16, 32, 16)):
        # projection block: conv1, affine1, relu1, conv2, affine2, 1x1 shortcut, its affine, add, relu
        total += 2 * c * cin * 9 * hw + 2 * c * hw + 2 * c * c * 9 * hw + c * hw + 2 * c * cin * hw + 3 * c * hw
        total += 2 * (2 * (2 * c * c * 9 * hw) + 2 * c * hw + 3 * c * hw)
    return total + 32 + 2 * 32 * 4  # pooling, head


def test_c05_flop_accounting():
    t0 = time.perf_counter()
    checks = {
        "dense-only": count_flops(dense_spec(10, 4)) == 10 + 2 * 10 * 4,
        "single-conv": count_flops(NetworkSpec((2, 8, 8), (), 5, ConvSpec(2, 3)))
        == 2 * 3 * 2 * 9 * 64 + 2 * 3 * 64 + 3 + 2 * 3 * 5,
        "reference": count_flops(resnet_spec(num_classes=4)) == reference_flops_by_hand() == 5_216_544,
    }
    model = init_model(resnet_spec(num_classes=4), 0)
    f0 = count_flops(model.spec)
    checks["block delta"] = f0 - count_flops(remove_block(model, LayerBlock(0, 1)).spec) == block_flops(model.spec, 0, 1)
    # four conv1 channels of s1.b1 at 8x8: conv1, affine1, relu1 and the conv2 input slice
    delta = f0 - count_flops(remove_filters(model, FilterGroup(1, 1, 1, (0, 1, 2, 3))).spec)
    checks["filter delta"] = delta == 2 * 4 * 16 * 9 * 64 + 2 * 4 * 64 + 2 * 16 * 4 * 9 * 64
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    report(5, not failed and elapsed < 1.0, f"exact on {len(checks)} checks" + (f", failed {failed}" if failed else ""), elapsed)


def test_c06_kl_criterion():
    t0 = time.perf_counter()
    model = silence_block(init_model(resnet_spec(num_classes=4), 5), 0, 2)
    probe = np.random.default_rng(6).uniform(0, 1, (32, 3, 16, 16)).astype(np.float32)
    score = kl_score(model, LayerBlock(0, 2), probe).score
    first = rank_structures(model, "layer", "kl", probe)[0].structure
    hand = float(kl_divergence([0.9, 0.1], [0.8, 0.2]))
    elapsed = time.perf_counter() - t0
    ok = abs(score) <= 1e-9 and first == LayerBlock(0, 2) and abs(hand - 0.03669) <= 1e-4 and elapsed < 5.0
    report(6, ok, f"identity block score {score:.1e}, ranked first: {first == LayerBlock(0, 2)}, hand case {hand:.5f}", elapsed)


# -- desk-scale pruning runs ------------------------------------------------------------


class Runs:
    pass


@pytest.fixture(scope="session")
def desk():
    torch.set_num_threads(1)
    full = synthetic_blobs(7, classes=4, samples=2048 + 1024, image_size=16)
    tr, te = full.subset(slice(0, 2048)), full.subset(slice(2048, None))
    out = Runs()
    t0 = time.perf_counter()
    out.model = train(init_model(resnet_spec(num_classes=4), 0), tr,
                      TrainConfig(epochs=30, learning_rate=0.01, lr_schedule=((20, 0.1),)))
    out.train_time = time.perf_counter() - t0
    out.cfg = {s: EngineConfig(K=6, seed=s) for s in SEEDS}
    out.cka, out.random, out.times = {}, {}, {}
    for s in SEEDS:
        t0 = time.perf_counter()
        out.cka[s] = run(out.model, out.cfg[s], tr, te)
        out.times[s] = time.perf_counter() - t0
        out.random[s] = run_random_walk(out.model, out.cfg[s], tr, te)
    t0 = time.perf_counter()
    out.repeat = run(out.model, out.cfg[SEEDS[0]], tr, te)
    out.repeat_time = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_c07_determinism_and_soundness(desk):
    a, b = desk.cka[SEEDS[0]], desk.repeat
    same = a.trace.compact == b.trace.compact and iterations_csv(a.trace) == iterations_csv(b.trace)
    sound = all(r.selection_sound() for res in desk.cka.values() for r in res.trace.records)
    flops = [a.original_flops] + [r.flops_after for r in a.trace.records]
    monotone = all(x > y for x, y in zip(flops, flops[1:]))
    after_exhaustion = all(
        r.chosen == "F" for res in desk.cka.values() for r in res.trace.records if r.layer_exhausted
    )
    elapsed = desk.times[SEEDS[0]] + desk.repeat_time
    ok = same and sound and monotone and after_exhaustion and len(a.trace) == 6 and elapsed < 600
    report(7, ok, f"traces {a.trace.compact} / {b.trace.compact}, identical csv {same}, sound {sound}, "
                  f"monotone {monotone}, F after exhaustion {after_exhaustion}", elapsed)


@pytest.mark.slow
def test_c08_capacity_band(desk):
    tau, checked, bad = 0.1, 0, []
    for s, res in desk.cka.items():
        for r in res.trace.records:
            if r.delta_layer is None:
                continue
            if r.delta_filter is None:
                if not (r.filter_exhausted and any(n.startswith("filter-exhausted") for n in r.notes)):
                    bad.append((s, r.index))
                continue
            checked += 1
            if not (1 - tau) * r.delta_layer <= r.delta_filter <= (1 + tau) * r.delta_layer:
                bad.append((s, r.index))
    report(8, not bad and checked > 0, f"{checked} iterations inside the +-10% band, violations {bad}")


def matched_accuracy(res, pct=MATCHED_PCT):
    for r in res.trace.records:
        if r.flop_reduction_pct >= pct:
            return r.accuracy_after, r.flop_reduction_pct
    return None, None


def reduction_before_first_negative(res):
    best = 0.0
    for r in res.trace.records:
        if r.accuracy_after < res.baseline_accuracy:
            break
        best = r.flop_reduction_pct
    return best


@pytest.mark.slow
def test_c09_directional_random_walk_comparison(desk):
    cka_acc = [matched_accuracy(desk.cka[s])[0] for s in SEEDS]
    rw_acc = [matched_accuracy(desk.random[s])[0] for s in SEEDS]
    reached = None not in cka_acc and None not in rw_acc
    if reached:
        mean_cka, mean_rw = 100 * np.mean(cka_acc), 100 * np.mean(rw_acc)
        accuracy_ok = mean_cka >= mean_rw - 0.5
    else:
        mean_cka = mean_rw = float("nan")
        accuracy_ok = False
    wins = [reduction_before_first_negative(desk.cka[s]) >= reduction_before_first_negative(desk.random[s]) for s in SEEDS]
    total = desk.train_time + sum(desk.times.values()) + desk.repeat_time
    ok = accuracy_ok and sum(wins) >= 2 and total < 3600
    pre = [(round(reduction_before_first_negative(desk.cka[s]), 1), round(reduction_before_first_negative(desk.random[s]), 1))
           for s in SEEDS]
    report(9, ok, f"mean acc at >=40% FLOPs: CKA {mean_cka:.2f}% vs RW {mean_rw:.2f}%; "
                  f"pre-negative reduction (CKA, RW) {pre}, CKA wins {sum(wins)}/3; "
                  f"traces {[desk.cka[s].trace.compact for s in SEEDS]} vs {[desk.random[s].trace.compact for s in SEEDS]}")


@pytest.mark.slow
def test_c10_pruned_model_viability(desk):
    res = desk.cka[SEEDS[0]]
    last = res.trace.records[-1]
    delta = 100 * (last.accuracy_after - res.baseline_accuracy)
    ok = last.flop_reduction_pct >= 40.0 and delta >= -2.0
    report(10, ok, f"K=6 FLOP reduction {last.flop_reduction_pct:.2f}%, delta accuracy {delta:+.2f} pp "
                   f"(baseline {res.baseline_accuracy:.4f})")
