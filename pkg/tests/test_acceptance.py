"""Acceptance gate: one reported PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the table is repeated in the
terminal summary under "acceptance".
"""
import time

import numpy as np
import pytest
from conftest import central_diff, module_grad_error, randomize, rel_err, report
from test_loss import edge_oracle, plain_bce

from efficientiml.backbone import Backbone, stage_splits
from efficientiml.block import ChannelSplit, EfficientRWKVBlock
from efficientiml.complexity import bench_ratios, bench_wkv, count_flops
from efficientiml.config import BackboneConfig, LossWeights, ModelConfig, load_config
from efficientiml.data import gen_synthetic, load_split
from efficientiml.decoder import MultiScalePrediction
from efficientiml.loss import TERM_NAMES, make_edge_mask, total_loss
from efficientiml.metrics import auc, auc_pairwise, confusion, f1, iou
from efficientiml.train import collate, evaluate, train
from efficientiml.wkv import WkvParams, wkv_backward, wkv_naive, wkv_scan


def rand_wkv(rng, T, C):
    k = rng.normal(size=(T, C))
    v = rng.normal(size=(T, C))
    return k, v, WkvParams.from_decay(rng.uniform(0.0, 8.0, C), rng.normal(size=C))


def test_c1_wkv_oracle_equivalence():
    rng = np.random.default_rng(101)
    e32 = e64 = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        k, v, p = rand_wkv(rng, int(rng.integers(1, 129)), int(rng.integers(1, 17)))
        e64 = max(e64, rel_err(wkv_scan(k, v, p), wkv_naive(k, v, p)))
        k32, v32 = k.astype(np.float32), v.astype(np.float32)
        y32 = wkv_scan(k32, v32, p)
        assert y32.dtype == np.float32
        e32 = max(e32, rel_err(y32, wkv_naive(k32, v32, p)))
    dt = time.perf_counter() - t0
    ok = e32 <= 1e-5 and e64 <= 1e-12 and dt < 10
    report(1, ok, "wkv scan == naive on 200 random cases",
           f"f32 max rel err {e32:.2e} <= 1e-5, f64 {e64:.2e} <= 1e-12, {dt:.2f}s < 10s")
    assert ok


def test_c2_wkv_properties():
    rng = np.random.default_rng(202)
    shift_err = rev_err = 0.0
    outside = 0
    n = 150
    for _ in range(n):
        k, v, p = rand_wkv(rng, int(rng.integers(1, 65)), int(rng.integers(1, 9)))
        y = wkv_scan(k, v, p)
        outside += int((y < v.min(axis=0)).sum() + (y > v.max(axis=0)).sum())
        shift_err = max(shift_err, rel_err(wkv_scan(k + rng.uniform(-30, 30), v, p), y))
        rev_err = max(rev_err, rel_err(wkv_scan(k[::-1].copy(), v[::-1].copy(), p)[::-1], y))
    ok = shift_err <= 1e-6 and rev_err <= 1e-6 and outside == 0
    report(2, ok, f"wkv properties on {n} cases each",
           f"key shift {shift_err:.2e} <= 1e-6, reversal {rev_err:.2e} <= 1e-6, "
           f"{outside} outputs outside the value range")
    assert ok


def test_c3_gradient_checks():
    rng = np.random.default_rng(303)
    worst_k = 0.0
    for _ in range(20):
        T, C = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        k, v, p = rand_wkv(rng, T, C)
        wf, u = p.w_free.copy(), p.u.copy()
        g = rng.normal(size=(T, C))

        def f():
            return float((wkv_naive(k, v, WkvParams(wf, u)) * g).sum())

        grads = wkv_backward(k, v, WkvParams(wf, u), g)
        for got, x in zip(grads, (k, v, wf, u)):
            worst_k = max(worst_k, rel_err(got, central_diff(f, x)))
    worst_b = 0.0
    for _ in range(20):
        c = int(rng.integers(4, 9))
        c_con, c_i = int(rng.integers(0, 3)), int(rng.integers(0, 2))
        blk = randomize(EfficientRWKVBlock(c, ChannelSplit(c - c_con - c_i, c_con, c_i),
                                           int(rng.choice([3, 5])), rng), rng, 0.4)
        x = rng.normal(size=(1, int(rng.integers(2, 5)), int(rng.integers(2, 5)), c))
        worst_b = max(worst_b, module_grad_error(blk, x, rng))
    ok = worst_k <= 1e-4 and worst_b <= 1e-3
    report(3, ok, "backward vs central differences, 20 configs each (f64, h=1e-5)",
           f"kernel {worst_k:.2e} <= 1e-4, block {worst_b:.2e} <= 1e-3")
    assert ok


def test_c4_shape_contract():
    cfg = BackboneConfig()
    bb = Backbone(cfg, np.random.default_rng(0))
    got = {}
    for s in (128, 256, 1024):
        f = bb.forward(np.zeros((1, s, s, 3), np.float32))
        got[s] = (f.f1.shape[1:], f.f2.shape[1:], f.f3.shape[1:])
    want = {s: ((s // 16, s // 16, 200), (s // 32, s // 32, 376), (s // 64, s // 64, 448)) for s in got}
    sums = [s.total for s in stage_splits(cfg)]
    ok = got == want and sums == list(cfg.channels)
    report(4, ok, "pyramid shapes at 128/256/1024 and channel partitions",
           f"shapes {'match' if got == want else got}, split sums {sums} == {list(cfg.channels)}")
    assert ok


def test_c5_loss_formula():
    rng = np.random.default_rng(505)
    s = 128
    pred = MultiScalePrediction(tuple(rng.normal(size=(1, s // f, s // f, 1)) for f in (16, 32, 64)),
                                rng.normal(size=(1, s, s, 1)))
    gt = np.zeros((1, s, s, 1))
    gt[:, 20:90, 30:100] = 1
    gt[:, 100:110, 5:40] = 1
    w = LossWeights(0.2, 0.3, 0.4, 0.9, 0.7)
    res = total_loss(pred, gt, w)
    want = 0.0
    for i, (lg, f, lam) in enumerate(zip(pred.logits, (16, 32, 64), (w.lambda_1, w.lambda_2, w.lambda_3)), 1):
        t = np.zeros(lg.shape)
        for a in range(lg.shape[1]):
            for b in range(lg.shape[2]):
                t[0, a, b, 0] = float(gt[0, a * f:(a + 1) * f, b * f:(b + 1) * f].mean() >= 0.5)
        p = 1 / (1 + np.exp(-lg))
        e = edge_oracle(t[0, ..., 0], max(1, 4 >> i))[None, ..., None]
        want += lam * plain_bce(p, t) + w.lambda_edge * plain_bce(p, t, e)
    p = 1 / (1 + np.exp(-pred.logits_final))
    want += w.lambda_final * plain_bce(p, gt) + w.lambda_edge * plain_bce(p, gt, make_edge_mask(gt, 4))
    err = abs(res.total - want)
    d = load_config().loss
    defaults = (d.lambda_1, d.lambda_2, d.lambda_3, d.lambda_final)
    ok = err <= 1e-9 and len(res.terms) == len(TERM_NAMES) == 8 and defaults == (0.15, 0.35, 0.55, 1.0)
    report(5, ok, "eight-term loss vs term-by-term oracle; default weights",
           f"abs err {err:.2e} <= 1e-9, {len(res.terms)} terms, defaults {defaults}")
    assert ok


def test_c6_metrics():
    rng = np.random.default_rng(606)
    dj = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        c = confusion(rng.random(n), (rng.random(n) < rng.random()).astype(int))
        F, J = f1(c), iou(c)
        dj = max(dj, abs(F - 2 * J / (1 + J)))
    auc_mismatch = 0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        sc = rng.integers(0, 6, n) / 5.0
        auc_mismatch += auc(sc, y) != auc_pairwise(sc, y)
    c = confusion(np.array([1.0, 0, 1, 0]), np.array([1, 1, 0, 0]))
    hand = ((f1(c), iou(c)) == (0.5, 1 / 3)
            and auc([0.9, 0.4, 0.35, 0.8], [1, 0, 1, 0]) == 0.5
            and f1(confusion(np.zeros(5), np.zeros(5))) == 1.0)
    ok = dj <= 1e-9 and auc_mismatch == 0 and hand
    report(6, ok, "Dice-Jaccard identity, AUC vs pair enumeration, hand cases",
           f"identity err {dj:.1e} over 1000 masks, {auc_mismatch}/100 AUC mismatches, "
           f"hand cases {'ok' if hand else 'wrong'}")
    assert ok


@pytest.mark.slow
def test_c7_complexity():
    cfg = ModelConfig()
    g1, g2 = count_flops(cfg, 1024).flops, count_flops(cfg, 2048).flops
    ratio = g2 / g1
    rows = bench_wkv(T_list=(1024, 4096), C_v=8, repeats=3, impls=("naive", "scan"))
    r = bench_ratios(rows, 1024, 4096)
    ok = 3.9 <= ratio <= 4.1 and g2 < 100e9 and r["scan"] <= 5.0 and r["naive"] >= 10.0
    report(7, ok, "complexity",
           f"FLOP ratio 2048/1024 {ratio:.4f} in [3.9, 4.1], {g2 / 1e9:.2f} GFLOPs @2048 < 100, "
           f"scan time ratio T=4096/1024 {r['scan']:.2f} <= 5, naive {r['naive']:.2f} >= 10")
    assert ok


# largest budget the criterion allows; lr above the desk preset's 5e-3 gave the lowest total loss
OVERFIT = {"train.steps": "500", "train.lr_init": "1e-2", "train.eval_every": "100"}


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    samples = load_split(gen_synthetic(root / "data", 8, 256, seed=0, ratio=(1, 0)), "all")
    cfg = load_config(preset="desk", overrides=OVERFIT)
    runs = []
    t0 = time.perf_counter()
    with np.errstate(over="ignore"):
        for _ in range(2):
            runs.append(train(cfg, samples=samples))
    return cfg, samples, runs, (time.perf_counter() - t0) / 2


@pytest.mark.slow
def test_c8_end_to_end_overfit(overfit):
    cfg, samples, (a, b), secs = overfit
    summary, _ = evaluate(a.model, samples)
    imgs, masks, _ = collate(samples)
    with np.errstate(over="ignore"):
        res = total_loss(a.model.forward(imgs), masks, cfg.loss)
    loss = res.total
    same = a.loss_trace == b.loss_trace
    ok = (summary["f1"] >= 0.95 and summary["acc"] >= 0.99 and loss < 0.05 and same
          and cfg.train.steps <= 500)
    misses = [name for name, good in (("f1", summary["f1"] >= 0.95), ("acc", summary["acc"] >= 0.99),
                                       ("loss", loss < 0.05), ("determinism", same)) if not good]
    report(8, ok, f"overfit 8 synthetic 256px images in {cfg.train.steps} steps"
           + (f"; missed: {', '.join(misses)}" if misses else ""),
           f"F1 {summary['f1']:.4f} >= 0.95, acc {summary['acc']:.4f} >= 0.99, loss {loss:.4f} < 0.05 "
           f"(fused bce {res.terms['bce_final']:.4f}, edge_final {res.terms['edge_final']:.4f}), "
           f"traces {'identical' if same else 'differ'}, {secs:.0f}s per run")
    assert ok


def test_c9_non_reproducibility_statement():
    statement = ("Benchmark accuracy tables (for example 42.6 average F1, 78.0 F1 on the 2048px set) "
                 "need large-scale pretraining and the original datasets; they are not reproduced here. "
                 "Criteria 1-8 are property-based substitutes.")
    report(9, True, "non-reproducibility statement", statement)
