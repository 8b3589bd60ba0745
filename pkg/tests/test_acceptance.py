"""Acceptance criteria 1-9. Criteria 5-7 train networks and take most of an hour on one CPU core."""
import csv
import math
import time

import numpy as np
import pytest
import torch
from dataclasses import replace

from conftest import record_criterion
from neuroseg.experiments import (TUBULE_RICH, gradient_suite, load_splits, run_ablation, run_experiment,
                                  smoke_run_config)
from neuroseg.losses import FocalParams, HybridWeights, LossConfig, TverskyParams, focal_loss, hybrid_loss, tversky_loss
from neuroseg.metrics import MetricsReport, report
from neuroseg.postprocess import (PostprocessConfig, TTADraw, predict, refine, remove_small_components,
                                  tta_predict)
from neuroseg.trainer import TrainConfig, train
from neuroseg.augment import AugmentConfig, BatchStream
from neuroseg.network import NetworkConfig, build_model
from test_metrics import loop_scores
from test_postprocess import filter_oracle


# ---------------------------------------------------------------- 1. gradients

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rows = gradient_suite(20)
    elapsed = time.perf_counter() - t0
    ok = all(r["passed"] for r in rows) and elapsed < 60
    detail = ", ".join(f"{r['loss']} {r['max_rel_error']:.1e}<{r['tolerance']:.0e}" for r in rows)
    record_criterion(1, ok, f"{detail}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. identities

def test_criterion_2_identity_suite():
    rng = np.random.default_rng(2)
    worst_dice = worst_bce = 0.0
    hybrid_exact = True
    eps = 1e-6
    for _ in range(100):
        pred = torch.tensor(rng.uniform(0.01, 0.99, (1, 1, 8, 8)))
        gt = torch.tensor((rng.random((1, 1, 8, 8)) < 0.4).astype(np.float64))
        tp, fp, fn = (pred * gt).sum(), (pred * (1 - gt)).sum(), ((1 - pred) * gt).sum()
        soft_dice = 1 - (2 * tp + 2 * eps) / (2 * tp + fp + fn + 2 * eps)
        worst_dice = max(worst_dice, abs(tversky_loss(pred, gt, TverskyParams(0.5, 0.5, eps)) - soft_dice).item())
        bce = torch.nn.functional.binary_cross_entropy(pred, gt)
        worst_bce = max(worst_bce, abs(focal_loss(pred, gt, FocalParams(gamma=0.0, alpha_t=1.0)) - bce).item())
        total, _ = hybrid_loss(pred, gt, LossConfig(weights=HybridWeights(1, 0, 0, 0)))
        hybrid_exact &= bool(total == tversky_loss(pred, gt))
    ok = worst_dice < 1e-9 and worst_bce < 1e-9 and hybrid_exact
    record_criterion(2, ok, f"tversky/dice {worst_dice:.1e}, focal/bce {worst_bce:.1e}, "
                            f"hybrid(1,0,0,0)==tversky {hybrid_exact}")
    assert ok


# ---------------------------------------------------------------- 3. metrics

def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(3)
    pairs = [(rng.random((16, 16)) < rng.uniform(0, 0.6), rng.random((16, 16)) < rng.uniform(0, 0.6))
             for _ in range(1000)]
    per = [loop_scores(p, g) for p, g in pairs]
    counts = np.sum([r["counts"] for r in per], axis=0)
    tp, fp, fn, tn = (int(c) for c in counts)
    pooled_pred = np.array([1] * tp + [1] * fp + [0] * fn + [0] * tn, bool)
    pooled_gt = np.array([1] * tp + [0] * fp + [1] * fn + [0] * tn, bool)
    expected = {"pooled": loop_scores(pooled_pred, pooled_gt),
                "per_image_mean": {k: float(np.mean([r[k] for r in per])) for k in MetricsReport.score_names()}}
    worst = 0.0
    for conv, want in expected.items():
        got = report(pairs, conv).to_dict()
        worst = max(worst, max(abs(got[k] - want[k]) for k in MetricsReport.score_names()))
    ok = worst <= 1e-12
    record_criterion(3, ok, f"max deviation {worst:.1e} over 1000 pairs, both conventions")
    assert ok


# ---------------------------------------------------------------- 4. postprocess

def test_criterion_4_component_filter_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        mask = rng.random((32, 32)) < rng.uniform(0.15, 0.55)
        mismatches += not np.array_equal(remove_small_components(mask, 15), filter_oracle(mask, 15))
    ok = mismatches == 0
    record_criterion(4, ok, f"{200 - mismatches}/200 masks match the BFS labelling oracle")
    assert ok


# ---------------------------------------------------------------- 5. training smoke

def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    cfg = smoke_run_config(epochs=30)
    splits = load_splits(cfg.data, cfg.preprocess)
    runs = []
    for name in ("first", "second"):
        t0 = time.perf_counter()
        res = run_experiment(cfg, tmp_path_factory.mktemp(name), splits=splits)
        runs.append((res, time.perf_counter() - t0))
    return cfg, splits, runs


def test_criterion_5_training_smoke(smoke):
    cfg, splits, runs = smoke
    (first, t_first), (second, _) = runs
    dice = first.test_reports["pooled"].dsc
    a, b = _read_csv(first.run_dir / "metrics.csv"), _read_csv(second.run_dir / "metrics.csv")
    worst = max(abs(float(x[k]) - float(y[k])) for x, y in zip(a, b) for k in x) if len(a) == len(b) else math.inf
    ok = dice >= 0.85 and t_first <= 15 * 60 and worst <= 1e-6 and len(a) <= 30
    record_criterion(5, ok, f"pooled test Dice {dice:.4f} (>=0.85) on {len(splits.test)} held-out phantoms, "
                            f"{len(a)} epochs in {t_first / 60:.1f} min, rerun max |diff| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 6. loss ablation

def test_criterion_6_directional_loss_ablation(tmp_path):
    cfg = smoke_run_config(epochs=30, tubule_count=TUBULE_RICH)
    t0 = time.perf_counter()
    rows = {r["variant"]: r for r in run_ablation(cfg, "loss", [0, 1, 2], tmp_path,
                                                   ["tversky", "focal", "hybrid"])}
    elapsed = time.perf_counter() - t0
    dsc_ok = rows["hybrid"]["dsc"] >= rows["tversky"]["dsc"]
    cl_ok = rows["hybrid"]["cldice"] > rows["focal"]["cldice"]
    ok = dsc_ok and cl_ok and elapsed <= 90 * 60
    record_criterion(6, ok, f"mean DSC hybrid {rows['hybrid']['dsc']:.4f} vs tversky {rows['tversky']['dsc']:.4f} "
                            f"({'ok' if dsc_ok else 'reversed'}); mean clDice hybrid {rows['hybrid']['cldice']:.4f} "
                            f"vs focal {rows['focal']['cldice']:.4f} ({'ok' if cl_ok else 'reversed'}); "
                            f"{elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 7. architecture ablation

def test_criterion_7_architecture_ablation(tmp_path):
    rows = {r["variant"]: r for r in run_ablation(smoke_run_config(epochs=30), "architecture", [0], tmp_path)}
    complete = set(rows) == {"residual", "residual_se", "msdb_se", "msdb_ha"}
    full, base = rows["msdb_ha"]["val_loss"], rows["residual"]["val_loss"]
    ok = complete and full <= base
    record_criterion(7, ok, f"4/4 variants: {complete}; best val loss msdb_ha {full:.5f} vs residual {base:.5f}; "
                            + ", ".join(f"{k} {v['val_loss']:.5f}" for k, v in rows.items()))
    assert ok


# ---------------------------------------------------------------- 8. TTA

def test_criterion_8_tta_consistency(smoke):
    cfg, splits, runs = smoke
    model = runs[0][0].model.eval()
    post = cfg.postprocess
    worst_identity = 0.0
    changed = foreground = 0
    for i, s in enumerate(splits.test):
        plain = predict(model, s.image)
        worst_identity = max(worst_identity,
                             float(np.abs(tta_predict(model, s.image, post, draws=[TTADraw()] * 5) - plain).max()))
        single = refine(plain, post).astype(bool)
        ensembled = refine(tta_predict(model, s.image, post, seed=i), post).astype(bool)
        changed += int((single != ensembled).sum())
        foreground += int(single.sum())
    frac = changed / max(foreground, 1)
    ok = worst_identity <= 1e-6 and frac < 0.10
    record_criterion(8, ok, f"identity-view max |diff| {worst_identity:.1e}; TTA changes {100 * frac:.2f}% "
                            f"of foreground pixels over {len(splits.test)} images")
    assert ok


# ---------------------------------------------------------------- 9. LR schedule

def test_criterion_9_lr_schedule():
    from neuroseg.imgio import PhantomConfig, phantom_dataset
    samples = phantom_dataset(PhantomConfig.toy(), 4)
    seq = iter([1.0, 0.9] + [0.9] * 40)
    res = train(build_model(NetworkConfig(depth=1, base_channels=8), seed=0),
                BatchStream(samples, 2, AugmentConfig.disabled(), reapply_clahe=False), [], LossConfig(),
                TrainConfig(epochs=50, batch_size=2, steps_per_epoch=1), monitor_fn=lambda m: next(seq))
    levels = sorted({r.lr for r in res.records}, reverse=True)
    stop = res.records[-1].epoch
    ok = levels == [3e-4, 1.5e-4, 7.5e-5] and res.stopped_early and stop == 17
    record_criterion(9, ok, f"lr levels {levels}; stopped at epoch {stop} after 15 non-improving epochs")
    assert ok
