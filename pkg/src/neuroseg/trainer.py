"""Training loop: AdamW, global-norm clipping, LR-on-plateau, early stopping,
best-checkpoint selection and per-epoch logging.

Run directory layout::

    config.json  metrics.csv  best.ckpt  last.ckpt  plots/{accuracy,loss,precision,recall}.png
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import BatchStream
from .imgio import SamplePair
from .losses import LossConfig, hybrid_loss
from .metrics import ConfusionCounts, MetricsReport, confusion, scores
from .network import NetworkConfig, SegmentationNet

log = logging.getLogger(__name__)

TERMS = ("tversky", "boundary", "focal", "cldice")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, ids: list[str]):
        super().__init__(f"non-finite loss at epoch {epoch} step {step}; batch ids: {ids}")
        self.ids = ids


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    epochs: int = 50
    batch_size: int = 16
    early_stop_patience: int = 15
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_delta: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps_per_epoch: int | None = None  # default ceil(n_train / batch_size)
    eval_batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive, weight_decay non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def global_norm(gradients) -> float:
    total = 0.0
    for g in gradients:
        if g is not None:
            total += float(torch.as_tensor(g, dtype=torch.float64).pow(2).sum())
    return math.sqrt(total)


def clip_global_norm(gradients, max_norm: float, in_place: bool = False):
    """Scale all gradients by ``max_norm / norm`` when their joint L2 norm exceeds it."""
    grads = [g if g is None or isinstance(g, torch.Tensor) else torch.as_tensor(g, dtype=torch.float64)
             for g in gradients]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    if in_place:
        for g in grads:
            if g is not None:
                g.mul_(scale)
        return grads
    return [None if g is None else g * scale for g in grads]


class _Patience:
    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def improved(self, value: float) -> bool:
        return value < self.best - self.min_delta

    def state_dict(self) -> dict:
        return {"best": self.best, "wait": self.wait}

    def load_state_dict(self, s: dict) -> None:
        self.best, self.wait = s["best"], s["wait"]


class ReduceLROnPlateau(_Patience):
    def __init__(self, factor: float, patience: int, min_delta: float = 1e-5):
        super().__init__(patience, min_delta)
        self.factor = factor

    def step(self, value: float) -> bool:
        """Returns True when the learning rate should be multiplied by ``factor``."""
        if self.improved(value):
            self.best, self.wait = value, 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return True
        return False


class EarlyStopping(_Patience):
    def step(self, value: float) -> bool:
        """Returns True when training should stop."""
        if self.improved(value):
            self.best, self.wait = value, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    train_terms: dict[str, float] = field(default_factory=dict)
    val_terms: dict[str, float] = field(default_factory=dict)
    train_metrics: dict[str, float] = field(default_factory=dict)
    val_metrics: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss, "val_loss": self.val_loss}
        for prefix, d in (("train", self.train_terms), ("val", self.val_terms),
                          ("train", self.train_metrics), ("val", self.val_metrics)):
            out.update({f"{prefix}_{k}": v for k, v in d.items() if k != "convention"})
        return out


@dataclass
class TrainResult:
    best_state: dict
    records: list[EpochRecord]
    best_epoch: int | None
    best_monitor: float
    stopped_early: bool = False


# ---------------------------------------------------------------- evaluation

def predict_probs(model: SegmentationNet, images: np.ndarray, batch_size: int = 16) -> torch.Tensor:
    """(N, 1, H, W) numpy -> probabilities, evaluation mode, no grad."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(torch.from_numpy(images[i:i + batch_size])))
    model.train(was_training)
    return torch.cat(outs)


def stack_samples(samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image[..., 0] for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask[..., 0] for s in samples])[:, None].astype(np.float32)
    return images, masks


def evaluate(model: SegmentationNet, samples: list[SamplePair], loss_config: LossConfig,
             batch_size: int = 16) -> tuple[float, dict[str, float], MetricsReport]:
    images, masks = stack_samples(samples)
    probs = predict_probs(model, images, batch_size)
    gt = torch.from_numpy(masks)
    with torch.no_grad():
        total, terms = hybrid_loss(probs, gt, loss_config)
    counts = confusion(probs.numpy() >= 0.5, masks > 0.5)
    return total.item(), {k: v.item() for k, v in terms.items()}, scores(counts)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: SegmentationNet, **extra) -> None:
    payload = {"model": model.state_dict(), "network_config": model.config.to_dict(), **extra}
    torch.save(payload, path)


def load_checkpoint(path, model: SegmentationNet | None = None,
                    config: NetworkConfig | None = None) -> tuple[SegmentationNet, dict]:
    """Restore weights; refuses if the stored network config differs from ``config``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stored = NetworkConfig(**payload["network_config"])
    expected = config or (model.config if model is not None else stored)
    if expected.to_dict() != stored.to_dict():
        raise ValueError(f"checkpoint {path} was saved with a different network config:\n"
                         f"stored   {stored.to_dict()}\nexpected {expected.to_dict()}")
    model = model or SegmentationNet(stored)
    model.load_state_dict(payload["model"])
    return model, payload


# ---------------------------------------------------------------- outputs

def write_metrics_csv(path, records: list[EpochRecord]) -> None:
    rows = [r.row() for r in records]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def plot_curves(plot_dir, records: list[EpochRecord]) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in records]
    panels = {
        "accuracy": ([r.train_metrics.get("accuracy") for r in records], [r.val_metrics.get("accuracy") for r in records]),
        "loss": ([r.train_loss for r in records], [r.val_loss for r in records]),
        "precision": ([r.train_metrics.get("precision") for r in records], [r.val_metrics.get("precision") for r in records]),
        "recall": ([r.train_metrics.get("recall") for r in records], [r.val_metrics.get("recall") for r in records]),
    }
    paths = []
    for name, (tr, va) in panels.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(epochs, tr, label="train")
        ax.plot(epochs, va, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.legend()
        fig.tight_layout()
        p = plot_dir / f"{name}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- loop

def train(model: SegmentationNet, stream: BatchStream, val_samples: list[SamplePair],
          loss_config: LossConfig | None = None, config: TrainConfig | None = None,
          run_dir=None, resume: bool = False, extra_config: dict | None = None,
          monitor_fn: Callable[[SegmentationNet], float] | None = None) -> TrainResult:
    """Train ``model`` on ``stream``; returns the best (not last) weights.

    ``monitor_fn`` replaces the validation loss as the monitored quantity
    (used to drive the callbacks with a synthetic signal).
    """
    loss_config = loss_config or LossConfig()
    cfg = config or TrainConfig()
    if not val_samples and monitor_fn is None:
        raise ValueError("validation set must be non-empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if extra_config is not None and not resume:
            (run_dir / "config.json").write_text(json.dumps(extra_config, indent=2, sort_keys=True))

    steps = cfg.steps_per_epoch or math.ceil(len(stream.samples) / cfg.batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)
    plateau = ReduceLROnPlateau(cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    torch.manual_seed(cfg.seed)

    records: list[EpochRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_monitor = None, math.inf
    start = 1
    if resume:
        if run_dir is None or not (run_dir / "last.ckpt").exists():
            raise FileNotFoundError(f"nothing to resume: {run_dir}/last.ckpt missing")
        _, state = load_checkpoint(run_dir / "last.ckpt", model)
        opt.load_state_dict(state["optimizer"])
        plateau.load_state_dict(state["plateau"])
        stopper.load_state_dict(state["early_stopping"])
        stream.load_state_dict(state["stream"])
        torch.set_rng_state(state["torch_rng"])
        records = [EpochRecord(**r) for r in state["records"]]
        best_epoch, best_monitor = state["best_epoch"], state["best_monitor"]
        best_state = torch.load(run_dir / "best.ckpt", weights_only=False)["model"] \
            if (run_dir / "best.ckpt").exists() else best_state
        start = state["epoch"] + 1
        if state.get("stopped"):
            return TrainResult(best_state, records, best_epoch, best_monitor, True)

    stopped = False
    for epoch in range(start, cfg.epochs + 1):
        lr = opt.param_groups[0]["lr"]
        model.train()
        sums = {"loss": 0.0, **{t: 0.0 for t in TERMS}}
        train_counts = ConfusionCounts()
        for step in range(steps):
            batch = next(stream)
            x, y = torch.from_numpy(batch.images), torch.from_numpy(batch.masks)
            pred = model(x)
            loss, terms = hybrid_loss(pred, y, loss_config)
            if not torch.isfinite(loss):
                log.error("non-finite loss, epoch %d step %d, ids %s", epoch, step, batch.ids)
                raise NonFiniteLossError(epoch, step, batch.ids)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            clip_global_norm([p.grad for p in model.parameters()], cfg.clip_norm, in_place=True)
            opt.step()
            sums["loss"] += loss.item()
            for t in TERMS:
                sums[t] += terms[t].item()
            train_counts = train_counts + confusion(pred.detach().numpy() >= 0.5, batch.masks > 0.5)

        if val_samples:
            val_loss, val_terms, val_report = evaluate(model, val_samples, loss_config, cfg.eval_batch_size)
        else:
            val_loss, val_terms, val_report = math.nan, {}, None
        monitor = monitor_fn(model) if monitor_fn is not None else val_loss
        rec = EpochRecord(
            epoch=epoch, lr=lr, train_loss=sums["loss"] / steps, val_loss=val_loss,
            train_terms={t: sums[t] / steps for t in TERMS}, val_terms=val_terms,
            train_metrics=scores(train_counts).to_dict(),
            val_metrics=val_report.to_dict() if val_report else {},
        )
        rec.train_metrics.pop("convention")
        rec.val_metrics.pop("convention", None)
        records.append(rec)

        if monitor < best_monitor - cfg.min_delta:
            best_monitor, best_epoch = monitor, epoch
            best_state = copy.deepcopy(model.state_dict())
            if run_dir is not None:
                save_checkpoint(run_dir / "best.ckpt", model, epoch=epoch, monitor=monitor)
        stopped = stopper.step(monitor)
        if not stopped and plateau.step(monitor):
            for g in opt.param_groups:
                g["lr"] = g["lr"] * cfg.plateau_factor
            log.info("epoch %d: lr reduced to %.3g", epoch, opt.param_groups[0]["lr"])
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, rec.train_loss, val_loss)

        if run_dir is not None:
            write_metrics_csv(run_dir / "metrics.csv", records)
            save_checkpoint(run_dir / "last.ckpt", model, epoch=epoch, optimizer=opt.state_dict(),
                            plateau=plateau.state_dict(), early_stopping=stopper.state_dict(),
                            stream=stream.state_dict(), torch_rng=torch.get_rng_state(),
                            records=[asdict(r) for r in records], best_epoch=best_epoch,
                            best_monitor=best_monitor, stopped=stopped)
        if stopped:
            log.info("early stopping at epoch %d", epoch)
            break

    if run_dir is not None:
        write_metrics_csv(run_dir / "metrics.csv", records)
        if records:
            plot_curves(run_dir / "plots", records)
        if best_epoch is None:
            save_checkpoint(run_dir / "best.ckpt", model, epoch=0, monitor=math.inf)
    return TrainResult(best_state, records, best_epoch, best_monitor, stopped)
