"""Experiment orchestration shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from .augment import BatchStream
from .config import ConfigError, DataConfig, RunConfig, toy_run_config
from .imgio import PhantomConfig, SamplePair, load_fnc, phantom_dataset, select, stratified_split
import torch

from .losses import (HYBRID_PRESETS, HybridWeights, boundary_loss, cldice_loss, focal_loss, gradcheck,
                     hybrid_loss, tversky_loss)
from .metrics import MetricsReport, cldice_metric, report_all
from .network import ARCHITECTURE_VARIANTS, SegmentationNet, build_model
from .postprocess import predict, refine, tta_predict
from .preprocess import preprocess_sample
from .trainer import TrainResult, train

log = logging.getLogger(__name__)

HOLDOUT_SEED_OFFSET = 1_000_000


def _subset_weights(names: tuple[str, ...]) -> HybridWeights:
    """Default hybrid weights restricted to ``names`` and renormalised to sum 1."""
    full = dict(zip(("tversky", "boundary", "focal", "cldice"), HYBRID_PRESETS["default"]))
    total = sum(full[n] for n in names)
    return HybridWeights(*[full[k] / total if k in names else 0.0 for k in full])


LOSS_VARIANTS: dict[str, HybridWeights] = {
    "tversky": _subset_weights(("tversky",)),
    "contour": _subset_weights(("boundary",)),
    "focal": _subset_weights(("focal",)),
    "cldice": _subset_weights(("cldice",)),
    "tversky+contour": _subset_weights(("tversky", "boundary")),
    "tversky+focal": _subset_weights(("tversky", "focal")),
    "tversky+contour+focal": _subset_weights(("tversky", "boundary", "focal")),
    "hybrid": HybridWeights.preset("default"),
}

GRIDS = ("loss", "architecture")


def smoke_run_config(epochs: int = 30, tubule_count: tuple[int, int] | None = None,
                     output_dir: str | None = None) -> RunConfig:
    """200 toy phantoms for training/validation plus 32 held-out test phantoms."""
    phantom = PhantomConfig.toy()
    if tubule_count is not None:
        phantom = replace(phantom, tubule_count=tubule_count)
    cfg = toy_run_config(data=DataConfig(phantom=phantom, n_samples=200, holdout=32,
                                         split_fractions=(0.8, 0.1, 0.1)),
                         output_dir=output_dir)
    return replace(cfg, train=replace(cfg.train, epochs=epochs))


TUBULE_RICH = (3, 5)


@dataclass
class Splits:
    train: list[SamplePair]
    val: list[SamplePair]
    test: list[SamplePair]


@dataclass
class ExperimentResult:
    run_dir: Path | None
    model: SegmentationNet
    train_result: TrainResult
    test_reports: dict[str, MetricsReport]
    test_cldice: float


def load_splits(data: DataConfig, preprocess_cfg) -> Splits:
    if data.dataset is not None:
        root = Path(data.dataset)
        if not root.exists():
            raise ConfigError(f"data.dataset: path does not exist: {root}")
        samples = load_fnc(root)
        if not samples:
            raise ConfigError(f"data.dataset: no images found under {root}")
    else:
        samples = phantom_dataset(data.phantom, data.n_samples, data.dense_fraction)
    samples = [preprocess_sample(s, preprocess_cfg) for s in samples]
    split = stratified_split(samples, data.split_fractions, data.split_seed)
    train_s, val_s, test_s = (select(samples, split.train_ids), select(samples, split.val_ids),
                              select(samples, split.test_ids))
    if data.holdout:
        if data.phantom is None:
            raise ConfigError("data.holdout requires a phantom config")
        held = phantom_dataset(replace(data.phantom, seed=data.phantom.seed + HOLDOUT_SEED_OFFSET),
                               data.holdout, data.dense_fraction)
        val_s = val_s + test_s
        test_s = [preprocess_sample(s, preprocess_cfg) for s in held]
    return Splits(train_s, val_s, test_s)


def evaluate_samples(model: SegmentationNet, samples: list[SamplePair], post_cfg,
                     use_tta: bool = False, seed: int = 0, return_pairs: bool = False):
    """Refined masks for ``samples`` -> (reports by convention, mean clDice score[, pairs])."""
    model.eval()
    pairs = []
    for i, s in enumerate(samples):
        prob = tta_predict(model, s.image, post_cfg, seed + i) if use_tta else predict(model, s.image)
        pairs.append((refine(prob, post_cfg), s.mask[..., 0]))
    reports = report_all(pairs)
    cl = float(np.mean([cldice_metric(p, g) for p, g in pairs]))
    return (reports, cl, pairs) if return_pairs else (reports, cl)


def run_experiment(cfg: RunConfig, run_dir=None, resume: bool = False,
                   splits: Splits | None = None) -> ExperimentResult:
    splits = splits or load_splits(cfg.data, cfg.preprocess)
    if not splits.train or not splits.val:
        raise ConfigError("training and validation splits must be non-empty")
    model = build_model(cfg.network, seed=cfg.seed)
    stream = BatchStream(splits.train, cfg.train.batch_size, replace(cfg.augment, seed=cfg.augment.seed + cfg.seed),
                         reapply_clahe=cfg.preprocess.apply_clahe, clahe_tile=cfg.preprocess.clahe_tile,
                         clahe_clip=cfg.preprocess.clahe_clip)
    result = train(model, stream, splits.val, cfg.loss, replace(cfg.train, seed=cfg.train.seed + cfg.seed),
                   run_dir=run_dir, resume=resume, extra_config=cfg.to_dict())
    model.load_state_dict(result.best_state)
    if run_dir is not None:
        # keep the full run config with the best weights for `predict`
        from .trainer import save_checkpoint
        save_checkpoint(Path(run_dir) / "best.ckpt", model, epoch=result.best_epoch,
                        monitor=result.best_monitor, run_config=cfg.to_dict())
    reports, cl = evaluate_samples(model, splits.test, cfg.postprocess) if splits.test else ({}, float("nan"))
    if run_dir is not None and reports:
        payload = {k: v.to_dict() for k, v in reports.items()}
        payload["cldice"] = cl
        (Path(run_dir) / "test_metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return ExperimentResult(Path(run_dir) if run_dir else None, model, result, reports, cl)


def variant_config(cfg: RunConfig, grid: str, variant: str, seed: int) -> RunConfig:
    if grid == "loss":
        loss = replace(cfg.loss, weights=LOSS_VARIANTS[variant])
        return replace(cfg, loss=loss, seed=seed)
    if grid == "architecture":
        net = replace(cfg.network, **ARCHITECTURE_VARIANTS[variant])
        return replace(cfg, network=net, seed=seed)
    raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")


def grid_variants(grid: str, only: list[str] | None = None) -> list[str]:
    names = list(LOSS_VARIANTS) if grid == "loss" else list(ARCHITECTURE_VARIANTS) if grid == "architecture" else None
    if names is None:
        raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")
    if only:
        bad = sorted(set(only) - set(names))
        if bad:
            raise ConfigError(f"unknown {grid} variant(s) {bad}; choose from {names}")
        names = [n for n in names if n in only]
    return names


SUMMARY_FIELDS = ["variant", "n_seeds", "val_loss", "cldice"] + MetricsReport.score_names()


def run_ablation(cfg: RunConfig, grid: str, seeds: list[int], out_dir,
                 variants: list[str] | None = None) -> list[dict]:
    """Train every variant for every seed on one shared split; one summary row per variant."""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    names = grid_variants(grid, variants)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = load_splits(cfg.data, cfg.preprocess)
    per_seed = []
    for name in names:
        for seed in seeds:
            vcfg = variant_config(cfg, grid, name, seed)
            res = run_experiment(vcfg, out_dir / f"{name}_seed{seed}", splits=splits)
            row = {"variant": name, "seed": seed, "val_loss": res.train_result.best_monitor,
                   "cldice": res.test_cldice, **{k: v for k, v in res.test_reports["pooled"].to_dict().items()
                                                 if k != "convention"}}
            per_seed.append(row)
            log.info("%s seed %d: %s", name, seed, row)
    _write_csv(out_dir / "per_seed.csv", per_seed, ["variant", "seed"] + SUMMARY_FIELDS[2:])
    summary = []
    for name in names:
        rows = [r for r in per_seed if r["variant"] == name]
        agg = {"variant": name, "n_seeds": len(rows)}
        for k in SUMMARY_FIELDS[2:]:
            agg[k] = float(np.mean([r[k] for r in rows]))
        summary.append(agg)
    _write_csv(out_dir / f"{grid}_summary.csv", summary, SUMMARY_FIELDS)
    return summary


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- gradient suite

GRADCHECK_LOSSES = {
    "tversky": (lambda p, g: tversky_loss(p, g), 1e-5),
    "focal": (lambda p, g: focal_loss(p, g), 1e-5),
    "boundary": (lambda p, g: boundary_loss(p, g), 1e-5),
    "cldice": (lambda p, g: cldice_loss(p, g), 1e-4),
    "hybrid": (lambda p, g: hybrid_loss(p, g)[0], 1e-4),
}


def gradcheck_inputs(seed: int, shape=(1, 1, 6, 6), lo: float = 0.05, hi: float = 0.95):
    """Tie-free float64 probabilities and a random binary mask.

    Values are a jittered, shuffled linspace so no two pixels come within a
    finite-difference step of each other (min/max pooling stays differentiable).
    """
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape))
    grid = np.linspace(lo, hi, n)
    vals = rng.permutation(grid + rng.uniform(-0.2, 0.2, n) * (grid[1] - grid[0]))
    mask = (np.random.default_rng(seed + 10_000).random(shape) < 0.4).astype(np.float64)
    return torch.tensor(vals.reshape(shape), dtype=torch.float64), torch.tensor(mask)


def gradient_suite(n_seeds: int = 20, step: float = 1e-4) -> list[dict]:
    """Worst relative gradient error per loss over ``n_seeds`` random 6x6 inputs."""
    rows = []
    for name, (fn, tol) in GRADCHECK_LOSSES.items():
        worst = max(gradcheck(fn, *gradcheck_inputs(seed), step=step) for seed in range(n_seeds))
        rows.append({"loss": name, "max_rel_error": worst, "tolerance": tol, "passed": worst < tol})
    return rows
