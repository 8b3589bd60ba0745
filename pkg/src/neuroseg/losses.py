"""Segmentation loss terms and the weighted hybrid combination.

All losses take ``pred`` (probabilities after sigmoid) and ``gt`` (binary
mask) as tensors of identical shape. Spatial operators (contour weights,
soft skeleton) expect ``(B, 1, H, W)`` but also accept ``(H, W)``.

Region losses (Tversky, weighted Dice, clDice) reduce over every pixel of
the batch at once; pointwise losses (BCE, focal) average per pixel.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F


@dataclass
class TverskyParams:
    alpha: float = 0.3  # false-positive weight
    beta: float = 0.7  # false-negative weight
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"invalid Tversky weights alpha={self.alpha} beta={self.beta}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class FocalParams:
    gamma: float = 3.0
    alpha_t: float = 0.8
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.alpha_t <= 1:
            raise ValueError("alpha_t must lie in (0, 1]")


@dataclass
class ContourParams:
    boundary_weight: float = 5.0
    boundary_radius: int = 1
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.boundary_weight < 1:
            raise ValueError("boundary_weight must be >= 1")
        if self.boundary_radius < 1:
            raise ValueError("boundary_radius must be >= 1")


@dataclass
class ClDiceParams:
    skeleton_iters: int = 5
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.skeleton_iters < 1:
            raise ValueError("skeleton_iters must be >= 1")


@dataclass
class HybridWeights:
    w_tversky: float = 0.4
    w_boundary: float = 0.2
    w_focal: float = 0.3
    w_cldice: float = 0.1

    def __post_init__(self):
        vals = astuple(self)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError(f"hybrid weights must be >= 0 with one positive, got {vals}")

    @classmethod
    def preset(cls, name: str) -> "HybridWeights":
        try:
            return cls(*HYBRID_PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown hybrid weight preset {name!r}; "
                             f"choose from {sorted(HYBRID_PRESETS)}") from None


# (tversky, boundary, focal, cldice)
HYBRID_PRESETS = {
    "default": (0.4, 0.2, 0.3, 0.1),
    # alternative ordering with contour and focal weights exchanged
    "contour_heavy": (0.4, 0.3, 0.2, 0.1),
}

# (alpha = FP weight, beta = FN weight)
TVERSKY_PRESETS = {
    "default": (0.3, 0.7),
    "swapped": (0.7, 0.3),
}


@dataclass
class LossConfig:
    """Everything ``hybrid_loss`` needs, in one serialisable bundle."""

    weights: HybridWeights = field(default_factory=HybridWeights)
    tversky: TverskyParams = field(default_factory=TverskyParams)
    focal: FocalParams = field(default_factory=FocalParams)
    contour: ContourParams = field(default_factory=ContourParams)
    cldice: ClDiceParams = field(default_factory=ClDiceParams)


def _check_shapes(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() == 4:
        return x
    raise ValueError(f"expected a 2-D, 3-D or 4-D tensor, got shape {tuple(x.shape)}")


def tversky_loss(pred: torch.Tensor, gt: torch.Tensor,
                 params: TverskyParams = TverskyParams()) -> torch.Tensor:
    _check_shapes(pred, gt)
    tp = (pred * gt).sum()
    fp = (pred * (1 - gt)).sum()
    fn = ((1 - pred) * gt).sum()
    eps = params.epsilon
    return 1 - (tp + eps) / (tp + params.alpha * fp + params.beta * fn + eps)


def focal_loss(pred: torch.Tensor, gt: torch.Tensor,
               params: FocalParams = FocalParams()) -> torch.Tensor:
    _check_shapes(pred, gt)
    eps = params.epsilon
    p = pred.clamp(eps, 1 - eps)
    p_t = p * gt + (1 - p) * (1 - gt)
    return (-params.alpha_t * (1 - p_t) ** params.gamma * torch.log(p_t)).mean()


def contour_weight_map(gt: torch.Tensor, params: ContourParams = ContourParams()) -> torch.Tensor:
    """Per-pixel weights: ``boundary_weight`` near GT edges, 1 elsewhere.

    The edge set is ``gt XOR erode(gt)`` with a 3x3 cross and zero padding,
    grown by a square dilation of ``boundary_radius``.
    """
    x = _as_nchw(gt if gt.is_floating_point() else gt.float())
    padded = F.pad(x, (1, 1, 1, 1), value=0.0)
    eroded = (x
              * padded[..., :-2, 1:-1] * padded[..., 2:, 1:-1]
              * padded[..., 1:-1, :-2] * padded[..., 1:-1, 2:])
    edge = x - eroded
    r = params.boundary_radius
    band = F.max_pool2d(edge, kernel_size=2 * r + 1, stride=1, padding=r)
    w = 1 + (params.boundary_weight - 1) * band
    return w.reshape(gt.shape).detach()


def boundary_loss(pred: torch.Tensor, gt: torch.Tensor,
                  params: ContourParams = ContourParams(),
                  weights: torch.Tensor | None = None) -> torch.Tensor:
    """Contour-weighted BCE plus contour-weighted (squared) Dice."""
    _check_shapes(pred, gt)
    w = contour_weight_map(gt, params) if weights is None else weights
    eps = params.epsilon
    p = pred.clamp(eps, 1 - eps)
    wbce = -(w * (gt * torch.log(p) + (1 - gt) * torch.log(1 - p))).mean()
    wdice = 1 - (2 * (w * pred * gt).sum() + eps) / (
        (w * pred * pred).sum() + (w * gt * gt).sum() + eps)
    return wbce + wdice


def _soft_erode(x: torch.Tensor) -> torch.Tensor:
    return -F.max_pool2d(-F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)


def _soft_dilate(x: torch.Tensor) -> torch.Tensor:
    return F.max_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)


def _soft_open(x: torch.Tensor) -> torch.Tensor:
    return _soft_dilate(_soft_erode(x))


def soft_skeleton(x: torch.Tensor, iters: int = 5) -> torch.Tensor:
    """Differentiable skeleton from iterated 3x3 min/max pooling."""
    shape = x.shape
    img = _as_nchw(x)
    skel = F.relu(img - _soft_open(img))
    for _ in range(iters):
        img = _soft_erode(img)
        delta = F.relu(img - _soft_open(img))
        skel = skel + F.relu(delta * (1 - skel))
    return skel.reshape(shape)


def topology_precision_recall(pred: torch.Tensor, gt: torch.Tensor,
                              params: ClDiceParams = ClDiceParams()):
    _check_shapes(pred, gt)
    eps = params.epsilon
    skel_gt = soft_skeleton(gt, params.skeleton_iters)
    skel_pred = soft_skeleton(pred, params.skeleton_iters)
    t_prec = ((skel_gt * pred).sum() + eps) / (skel_gt.sum() + eps)
    t_recall = ((skel_pred * gt).sum() + eps) / (skel_pred.sum() + eps)
    return t_prec, t_recall


def cldice_loss(pred: torch.Tensor, gt: torch.Tensor,
                params: ClDiceParams = ClDiceParams()) -> torch.Tensor:
    t_prec, t_recall = topology_precision_recall(pred, gt, params)
    return 1 - 2 * t_prec * t_recall / (t_prec + t_recall)


def hybrid_loss(pred: torch.Tensor, gt: torch.Tensor,
                config: LossConfig | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the four terms; returns ``(total, per-term breakdown)``."""
    cfg = config or LossConfig()
    terms = {
        "tversky": tversky_loss(pred, gt, cfg.tversky),
        "boundary": boundary_loss(pred, gt, cfg.contour),
        "focal": focal_loss(pred, gt, cfg.focal),
        "cldice": cldice_loss(pred, gt, cfg.cldice),
    }
    w = cfg.weights
    total = (w.w_tversky * terms["tversky"] + w.w_boundary * terms["boundary"]
             + w.w_focal * terms["focal"] + w.w_cldice * terms["cldice"])
    return total, terms


def gradcheck(loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
              pred: torch.Tensor, gt: torch.Tensor, step: float = 1e-4) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` must return a scalar tensor. Evaluated in float64.
    """
    p = pred.detach().to(torch.float64).clone().requires_grad_(True)
    g = gt.detach().to(torch.float64)
    loss = loss_fn(p, g)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    (analytic,) = torch.autograd.grad(loss, p)

    flat = p.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = loss_fn(flat.view_as(p), g).item()
            flat[i] = orig - step
            lo = loss_fn(flat.view_as(p), g).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError(f"non-finite loss while perturbing element {i}")
            numeric[i] = (hi - lo) / (2 * step)

    a = analytic.reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(1e-8, dtype=a.dtype))
    return ((a - numeric).abs() / denom).max().item()
