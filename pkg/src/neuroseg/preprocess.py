"""Input normalisation: area-resize, CLAHE, channel formatting."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np

from .imgio import SamplePair

N_BINS = 256


@dataclass
class PreprocessConfig:
    target_size: tuple[int, int] = (512, 768)
    clahe_tile: tuple[int, int] = (8, 8)
    clahe_clip: float = 3.0
    apply_clahe: bool = True

    def __post_init__(self):
        self.target_size = tuple(self.target_size)
        self.clahe_tile = tuple(self.clahe_tile)
        if min(self.target_size) <= 0:
            raise ValueError(f"target_size must be positive, got {self.target_size}")
        if min(self.clahe_tile) < 1:
            raise ValueError("clahe_tile must be positive")
        if self.clahe_clip <= 1.0:
            raise ValueError("clahe_clip must exceed 1.0")

    def check_depth(self, depth: int) -> None:
        k = 2 ** depth
        h, w = self.target_size
        if h % k or w % k:
            raise ValueError(f"target_size {self.target_size} not divisible by 2**{depth}")

    def to_dict(self) -> dict:
        return asdict(self)


def resize_pair(sample: SamplePair, target: tuple[int, int]) -> SamplePair:
    h, w = target
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    sh, sw = sample.image.shape[:2]
    if sh < 8 or sw < 8:
        raise ValueError(f"{sample.id}: source {sh}x{sw} is smaller than 8x8")
    if (sh, sw) == (h, w):
        return SamplePair(sample.image.copy(), sample.mask.copy(), sample.id, sample.density_tag)
    image = cv2.resize(sample.image[..., 0], (w, h), interpolation=cv2.INTER_AREA)
    mask = cv2.resize(sample.mask[..., 0].astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    return SamplePair(np.clip(image, 0, 1)[..., None].astype(np.float32),
                      (mask > 0).astype(np.uint8)[..., None], sample.id, sample.density_tag)


def _tile_luts(img: np.ndarray, tile: tuple[int, int], clip: float) -> np.ndarray:
    th, tw = tile
    h, w = img.shape
    ny, nx = -(-h // th), -(-w // tw)
    # clamp-extend borders so edge tiles are full size
    padded = np.pad(img, ((0, ny * th - h), (0, nx * tw - w)), mode="edge")
    bins = np.clip((padded * N_BINS).astype(np.int64), 0, N_BINS - 1)
    tiles = bins.reshape(ny, th, nx, tw).transpose(0, 2, 1, 3).reshape(ny * nx, th * tw)
    offsets = np.arange(ny * nx)[:, None] * N_BINS
    hist = np.bincount((tiles + offsets).ravel(), minlength=ny * nx * N_BINS)
    hist = hist.reshape(ny * nx, N_BINS).astype(np.float64)

    n = th * tw
    limit = clip * n / N_BINS
    excess = np.maximum(hist - limit, 0).sum(axis=1, keepdims=True)
    hist = np.minimum(hist, limit) + excess / N_BINS
    lut = np.cumsum(hist, axis=1) / n
    return np.clip(lut, 0, 1).reshape(ny, nx, N_BINS)


def _neighbours(n_pixels: int, size: int, n_tiles: int):
    f = (np.arange(n_pixels) + 0.5) / size - 0.5
    lo = np.floor(f).astype(np.int64)
    wt = f - lo
    wt[lo < 0] = 0.0
    lo = np.clip(lo, 0, n_tiles - 1)
    hi = np.minimum(lo + 1, n_tiles - 1)
    wt[lo == n_tiles - 1] = 0.0
    return lo, hi, wt


def clahe(image: np.ndarray, tile=(8, 8), clip: float = 3.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation on [0, 1] intensities.

    ``tile`` is the tile size in pixels. Each tile's 256-bin histogram is
    clipped at ``clip`` times the mean bin count, the excess spread evenly,
    and pixels are mapped through a bilinear blend of the four nearest tile
    CDFs.
    """
    squeeze = image.ndim == 3
    img = image[..., 0] if squeeze else image
    th, tw = tile
    h, w = img.shape
    if h < th or w < tw:
        raise ValueError(f"image {h}x{w} is smaller than one {th}x{tw} tile")
    img = np.clip(img.astype(np.float64), 0, 1)
    luts = _tile_luts(img, (th, tw), clip)
    ny, nx = luts.shape[:2]
    y0, y1, wy = _neighbours(h, th, ny)
    x0, x1, wx = _neighbours(w, tw, nx)
    b = np.clip((img * N_BINS).astype(np.int64), 0, N_BINS - 1)

    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    out = ((1 - WY) * ((1 - WX) * luts[Y0, X0, b] + WX * luts[Y0, X1, b])
           + WY * ((1 - WX) * luts[Y1, X0, b] + WX * luts[Y1, X1, b]))
    out = np.clip(out, 0, 1).astype(np.float32)
    return out[..., None] if squeeze else out


def preprocess_sample(sample: SamplePair, config: PreprocessConfig) -> SamplePair:
    """resize -> CLAHE -> (H, W, 1)."""
    out = resize_pair(sample, config.target_size)
    if config.apply_clahe:
        out.image = clahe(out.image, config.clahe_tile, config.clahe_clip)
    return out


def preprocess_image(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    img = image[..., 0] if image.ndim == 3 else image
    if img.shape != tuple(config.target_size):
        h, w = config.target_size
        img = np.clip(cv2.resize(img.astype(np.float32), (w, h), interpolation=cv2.INTER_AREA), 0, 1)
    if config.apply_clahe:
        img = clahe(img, config.clahe_tile, config.clahe_clip)
    return img[..., None].astype(np.float32)
