"""Inference refinement: threshold, closing, small-component removal, TTA."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

# 3x3 elliptical structuring element == 4-connected cross
ELLIPSE_3X3 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class PostprocessConfig:
    threshold: float = 0.5
    min_area: int = 15
    tta_n: int = 5
    tta_flips: bool = True
    tta_brightness: float = 0.1

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")
        if self.tta_n < 1:
            raise ValueError("tta_n must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def closing(mask: np.ndarray) -> np.ndarray:
    """Binary closing with the 3x3 ellipse; the frame is padded with background."""
    padded = np.pad(mask.astype(bool), 1)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, ELLIPSE_3X3), ELLIPSE_3X3)
    return closed[1:-1, 1:-1]


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask.astype(bool)
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def refine(prob: np.ndarray, config: PostprocessConfig | None = None) -> np.ndarray:
    """Probability map (H, W[, 1]) -> cleaned binary uint8 mask of the same shape."""
    cfg = config or PostprocessConfig()
    p = prob[..., 0] if prob.ndim == 3 else prob
    binary = closing(p >= cfg.threshold)
    out = remove_small_components(binary, cfg.min_area).astype(np.uint8)
    return out.reshape(prob.shape)


@dataclass
class TTADraw:
    flip_h: bool = False
    flip_v: bool = False
    brightness: float = 0.0


def sample_tta_draws(config: PostprocessConfig, seed: int) -> list[TTADraw]:
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(config.tta_n):
        u = rng.random(2)
        b = float(rng.uniform(-config.tta_brightness, config.tta_brightness))
        draws.append(TTADraw(bool(config.tta_flips and u[0] < 0.5),
                             bool(config.tta_flips and u[1] < 0.5), b))
    return draws


def _flip(x: np.ndarray, d: TTADraw) -> np.ndarray:
    if d.flip_h:
        x = x[..., ::-1]
    if d.flip_v:
        x = x[..., ::-1, :]
    return x


def predict_views(model: Callable, image: np.ndarray, draws: list[TTADraw]) -> np.ndarray:
    """Per-view probability maps, already mapped back to the input frame: (n, H, W)."""
    img = image[..., 0] if image.ndim == 3 else image
    views = [np.clip(_flip(img, d) + d.brightness, 0, 1) for d in draws]
    batch = torch.from_numpy(np.stack(views)[:, None].astype(np.float32))
    with torch.no_grad():
        probs = model(batch)[:, 0].cpu().numpy().astype(np.float64)
    return np.stack([_flip(p, d) for p, d in zip(probs, draws)])


def tta_predict(model: Callable, image: np.ndarray, config: PostprocessConfig | None = None,
                seed: int = 0, draws: list[TTADraw] | None = None) -> np.ndarray:
    """Mean of the de-augmented view predictions (averaged before thresholding)."""
    cfg = config or PostprocessConfig()
    draws = draws if draws is not None else sample_tta_draws(cfg, seed)
    views = predict_views(model, image, draws)
    out = np.zeros(views.shape[1:])
    for v in views:  # fixed reduction order
        out += v
    return np.clip(out / len(views), 0, 1).astype(np.float32)


def predict(model: Callable, image: np.ndarray) -> np.ndarray:
    """Single forward pass on one (H, W[, 1]) image -> (H, W) probabilities."""
    return predict_views(model, image, [TTADraw()])[0].astype(np.float32)
