"""Pixel-level evaluation scores.

Two aggregation conventions are always available:

``pooled``
    confusion counts are summed over all images, then every score is
    computed once. ``micro_f1`` is the pooled foreground F1, ``macro_f1`` the
    mean of pooled foreground and pooled background F1.
``per_image_mean``
    every score is computed per image, then averaged. Its ``f1`` is the
    mean per-image foreground F1, the other common reading of macro F1.

A 0/0 ratio scores 1 when both sets it compares are empty, else 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .losses import soft_skeleton

CONVENTIONS = ("pooled", "per_image_mean")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def inverted(self) -> "ConfusionCounts":
        """Counts with foreground and background exchanged."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    macro_f1: float
    micro_f1: float
    dsc: float
    iou: float
    convention: str = "pooled"

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def score_names() -> list[str]:
        return [f.name for f in fields(MetricsReport) if f.name != "convention"]


def _binary(x) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _f1(c: ConfusionCounts) -> float:
    # 2PR/(P+R) written on counts, identical to the Dice coefficient
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.tp + c.fp == 0 and c.tp + c.fn == 0)


def scores(c: ConfusionCounts, convention: str = "pooled") -> MetricsReport:
    pred_empty = c.tp + c.fp == 0
    gt_empty = c.tp + c.fn == 0
    precision = _ratio(c.tp, c.tp + c.fp, pred_empty and gt_empty)
    recall = _ratio(c.tp, c.tp + c.fn, pred_empty and gt_empty)
    specificity = _ratio(c.tn, c.tn + c.fp, c.tn + c.fp == 0 and c.tn + c.fn == 0)
    f1_fg = _f1(c)
    f1_bg = _f1(c.inverted())
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.total, True),
        balanced_accuracy=(recall + specificity) / 2,
        precision=precision,
        recall=recall,
        f1=f1_fg,
        macro_f1=(f1_fg + f1_bg) / 2,
        micro_f1=f1_fg,
        dsc=f1_fg,
        iou=_ratio(c.tp, c.tp + c.fp + c.fn, pred_empty and gt_empty),
        convention=convention,
    )


def report(pairs, convention: str = "pooled") -> MetricsReport:
    """Aggregate scores over ``(pred, gt)`` binary mask pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot report metrics on an empty list of pairs")
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    counts = [confusion(p, g) for p, g in pairs]
    if convention == "pooled":
        total = ConfusionCounts()
        for c in counts:
            total = total + c
        return scores(total, "pooled")
    per_image = [scores(c).to_dict() for c in counts]
    mean = {k: float(np.mean([r[k] for r in per_image])) for k in MetricsReport.score_names()}
    return MetricsReport(**mean, convention="per_image_mean")


def report_all(pairs) -> dict[str, MetricsReport]:
    pairs = list(pairs)
    return {conv: report(pairs, conv) for conv in CONVENTIONS}


def cldice_metric(pred, gt, iters: int = 5, epsilon: float = 1e-6) -> float:
    """Centreline Dice score on hard masks (1 = perfect topology agreement)."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    pt = torch.from_numpy(p.astype(np.float64))
    gt_t = torch.from_numpy(g.astype(np.float64))
    skel_p = soft_skeleton(pt, iters)
    skel_g = soft_skeleton(gt_t, iters)
    t_prec = ((skel_g * pt).sum() + epsilon) / (skel_g.sum() + epsilon)
    t_recall = ((skel_p * gt_t).sum() + epsilon) / (skel_p.sum() + epsilon)
    return float(2 * t_prec * t_recall / (t_prec + t_recall))
