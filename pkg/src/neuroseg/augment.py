"""Synchronised geometric/photometric augmentation and the online batch stream.

Transforms are pure functions of an explicit draw record, so any batch can be
replayed from its logged draws. All geometric steps are composed into one
source-coordinate map and sampled once: bilinear for images, nearest for
masks, zero (background) outside the frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import ndimage

from .imgio import SamplePair
from .preprocess import clahe


@dataclass
class ElasticParams:
    alpha: float = 30.0
    sigma: float = 6.0
    probability: float = 0.3
    reference_height: int = 512  # alpha/sigma are quoted at this height and scaled


@dataclass
class GridParams:
    steps: int = 5
    limit: float = 0.2
    probability: float = 0.3


@dataclass
class AugmentConfig:
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    p_rotate: float = 0.5
    rotate_max_deg: float = 45.0
    p_crop: float = 0.3
    crop_fraction: tuple[float, float] = (0.8, 1.0)
    p_brightness: float = 0.5
    brightness_delta: float = 0.3
    p_contrast: float = 0.5
    contrast_delta: float = 0.3
    p_noise: float = 0.3
    noise_sigma: tuple[float, float] = (0.0, 0.03)
    p_blur: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.0)
    elastic: ElasticParams = field(default_factory=ElasticParams)
    grid_distort: GridParams = field(default_factory=GridParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.elastic, dict):
            self.elastic = ElasticParams(**self.elastic)
        if isinstance(self.grid_distort, dict):
            self.grid_distort = GridParams(**self.grid_distort)
        self.crop_fraction = tuple(self.crop_fraction)
        self.noise_sigma = tuple(self.noise_sigma)
        self.blur_sigma = tuple(self.blur_sigma)
        probs = (self.p_flip_h, self.p_flip_v, self.p_rotate, self.p_crop, self.p_brightness,
                 self.p_contrast, self.p_noise, self.p_blur, self.elastic.probability,
                 self.grid_distort.probability)
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("all augmentation probabilities must lie in [0, 1]")
        if not 0 <= self.rotate_max_deg <= 180:
            raise ValueError("rotate_max_deg must lie in [0, 180]")
        lo, hi = self.crop_fraction
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_fraction must be a range inside (0, 1]")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        zero = dict(p_flip_h=0, p_flip_v=0, p_rotate=0, p_crop=0, p_brightness=0, p_contrast=0,
                    p_noise=0, p_blur=0, elastic=ElasticParams(probability=0),
                    grid_distort=GridParams(probability=0))
        return cls(**{**zero, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeometricDraw:
    flip_h: bool = False
    flip_v: bool = False
    rotate_deg: float = 0.0
    crop: tuple[float, float, float, float] | None = None  # top, left, height, width as fractions
    elastic_seed: int | None = None
    elastic_alpha: float = 0.0
    elastic_sigma: float = 1.0
    grid_x: list[float] | None = None  # per-cell scale factors
    grid_y: list[float] | None = None

    @property
    def is_identity(self) -> bool:
        return (not self.flip_h and not self.flip_v and self.rotate_deg == 0 and self.crop is None
                and self.elastic_seed is None and self.grid_x is None)


@dataclass
class PhotometricDraw:
    brightness: float = 0.0
    contrast: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    blur_sigma: float = 0.0


@dataclass
class AugmentDraw:
    geometric: GeometricDraw = field(default_factory=GeometricDraw)
    photometric: PhotometricDraw = field(default_factory=PhotometricDraw)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_draw(config: AugmentConfig, rng: np.random.Generator, shape: tuple[int, int]) -> AugmentDraw:
    """Draw one augmentation record. Every gate consumes the same number of
    random values whether it fires or not, so streams stay aligned."""
    u = rng.random(10)
    geo = GeometricDraw()
    geo.flip_h = bool(u[0] < config.p_flip_h)
    geo.flip_v = bool(u[1] < config.p_flip_v)
    angle = float(rng.uniform(-config.rotate_max_deg, config.rotate_max_deg))
    if u[2] < config.p_rotate:
        geo.rotate_deg = angle
    frac = rng.uniform(*config.crop_fraction, size=2)
    pos = rng.random(2)
    if u[3] < config.p_crop:
        ch, cw = frac
        geo.crop = (float(pos[0] * (1 - ch)), float(pos[1] * (1 - cw)), float(ch), float(cw))
    el_seed = int(rng.integers(2**31))
    if u[4] < config.elastic.probability:
        scale = shape[0] / config.elastic.reference_height
        geo.elastic_seed = el_seed
        geo.elastic_alpha = config.elastic.alpha * scale
        geo.elastic_sigma = config.elastic.sigma * scale
    g = config.grid_distort
    gx = 1 + rng.uniform(-g.limit, g.limit, g.steps)
    gy = 1 + rng.uniform(-g.limit, g.limit, g.steps)
    if u[5] < g.probability:
        geo.grid_x, geo.grid_y = gx.tolist(), gy.tolist()

    pho = PhotometricDraw()
    b = float(rng.uniform(-config.brightness_delta, config.brightness_delta))
    c = float(rng.uniform(-config.contrast_delta, config.contrast_delta))
    ns = float(rng.uniform(*config.noise_sigma))
    nseed = int(rng.integers(2**31))
    bs = float(rng.uniform(*config.blur_sigma))
    if u[6] < config.p_brightness:
        pho.brightness = b
    if u[7] < config.p_contrast:
        pho.contrast = c
    if u[8] < config.p_noise:
        pho.noise_sigma, pho.noise_seed = ns, nseed
    if u[9] < config.p_blur:
        pho.blur_sigma = bs
    return AugmentDraw(geo, pho)


def _grid_axis_map(n: int, scales: list[float]) -> np.ndarray:
    """Piecewise-linear map from output to source positions along one axis."""
    k = len(scales)
    out_knots = np.linspace(0, n - 1, k + 1)
    widths = np.asarray(scales, dtype=np.float64)
    src_knots = np.concatenate([[0], np.cumsum(widths)]) / widths.sum() * (n - 1)
    return np.interp(np.arange(n, dtype=np.float64), out_knots, src_knots)


def source_coordinates(draw: GeometricDraw, shape: tuple[int, int]) -> np.ndarray:
    """(2, H, W) source row/column for every output pixel."""
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if draw.grid_x is not None:
        ys = np.broadcast_to(_grid_axis_map(h, draw.grid_y)[:, None], (h, w)).copy()
        xs = np.broadcast_to(_grid_axis_map(w, draw.grid_x)[None, :], (h, w)).copy()
    if draw.elastic_seed is not None:
        erng = np.random.default_rng(draw.elastic_seed)
        field = erng.uniform(-1, 1, (2, h, w))
        dy = ndimage.gaussian_filter(field[0], draw.elastic_sigma, mode="constant") * draw.elastic_alpha
        dx = ndimage.gaussian_filter(field[1], draw.elastic_sigma, mode="constant") * draw.elastic_alpha
        ys, xs = ys + dy, xs + dx
    if draw.crop is not None:
        top, left, ch, cw = draw.crop
        if ch <= 0 or cw <= 0:
            raise ValueError(f"degenerate crop {draw.crop}")
        ys = top * h + (ys + 0.5) * ch - 0.5
        xs = left * w + (xs + 0.5) * cw - 0.5
    if draw.rotate_deg:
        # positive angle rotates content counter-clockwise on screen
        t = math.radians(draw.rotate_deg)
        cy, cx = (h - 1) / 2, (w - 1) / 2
        dy, dx = ys - cy, xs - cx
        ys = cy + math.cos(t) * dy + math.sin(t) * dx
        xs = cx - math.sin(t) * dy + math.cos(t) * dx
    if draw.flip_v:
        ys = (h - 1) - ys
    if draw.flip_h:
        xs = (w - 1) - xs
    # drop trig round-off so exact quarter turns land on the pixel grid
    return np.round(np.stack([ys, xs]), 9)


def apply_geometric(sample: SamplePair, draw: GeometricDraw) -> SamplePair:
    if draw.crop is not None and (draw.crop[2] <= 0 or draw.crop[3] <= 0):
        raise ValueError(f"degenerate crop {draw.crop}")
    if draw.is_identity:
        return SamplePair(sample.image.copy(), sample.mask.copy(), sample.id, sample.density_tag)
    coords = source_coordinates(draw, sample.image.shape[:2])
    image = ndimage.map_coordinates(sample.image[..., 0].astype(np.float64), coords, order=1,
                                    mode="constant", cval=0.0)
    mask = ndimage.map_coordinates(sample.mask[..., 0], coords, order=0, mode="constant", cval=0)
    return SamplePair(np.clip(image, 0, 1).astype(np.float32)[..., None],
                      (mask > 0).astype(np.uint8)[..., None], sample.id, sample.density_tag)


def apply_photometric(image: np.ndarray, draw: PhotometricDraw) -> np.ndarray:
    out = image.astype(np.float64)
    if draw.brightness:
        out = out + draw.brightness
    if draw.contrast:
        mean = out.mean()
        out = (out - mean) * (1 + draw.contrast) + mean
    if draw.noise_sigma > 0:
        out = out + np.random.default_rng(draw.noise_seed).normal(0, draw.noise_sigma, out.shape)
    if draw.blur_sigma > 0:
        sig = (draw.blur_sigma, draw.blur_sigma, 0) if out.ndim == 3 else draw.blur_sigma
        out = ndimage.gaussian_filter(out, sig, mode="reflect")
    return np.clip(out, 0, 1).astype(np.float32)


def augment_sample(sample: SamplePair, draw: AugmentDraw, reapply_clahe: bool = False,
                   clahe_tile=(8, 8), clahe_clip: float = 3.0) -> SamplePair:
    out = apply_geometric(sample, draw.geometric)
    out.image = apply_photometric(out.image, draw.photometric)
    if reapply_clahe:
        out.image = clahe(out.image, clahe_tile, clahe_clip)
    return out


class Batch(NamedTuple):
    images: np.ndarray  # (B, 1, H, W) float32
    masks: np.ndarray  # (B, 1, H, W) float32
    ids: list[str]
    draws: list[AugmentDraw]


class BatchStream:
    """Infinite stream of augmented batches.

    Sample order is reshuffled every pass; batches run on across pass
    boundaries. ``state_dict``/``load_state_dict`` allow exact resumption.
    """

    def __init__(self, samples: list[SamplePair], batch_size: int = 16,
                 config: AugmentConfig | None = None, reapply_clahe: bool = True,
                 clahe_tile=(8, 8), clahe_clip: float = 3.0):
        if not samples:
            raise ValueError("cannot build a batch stream from an empty sample list")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"samples must share one shape, got {sorted(shapes)}")
        self.samples = samples
        self.batch_size = batch_size
        self.config = config or AugmentConfig()
        self.reapply_clahe = reapply_clahe
        self.clahe_tile, self.clahe_clip = tuple(clahe_tile), clahe_clip
        self.rng = np.random.default_rng(self.config.seed)
        self._order: list[int] = []
        self._pos = 0

    def _next_index(self) -> int:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.samples)).tolist()
            self._pos = 0
        i = self._order[self._pos]
        self._pos += 1
        return i

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        images, masks, ids, draws = [], [], [], []
        for _ in range(self.batch_size):
            s = self.samples[self._next_index()]
            draw = sample_draw(self.config, self.rng, s.image.shape[:2])
            aug = augment_sample(s, draw, self.reapply_clahe, self.clahe_tile, self.clahe_clip)
            images.append(aug.image[..., 0])
            masks.append(aug.mask[..., 0])
            ids.append(s.id)
            draws.append(draw)
        return Batch(np.stack(images)[:, None].astype(np.float32),
                     np.stack(masks)[:, None].astype(np.float32), ids, draws)

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": list(self._order), "pos": self._pos}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = list(state["order"])
        self._pos = int(state["pos"])


def batch_generator(samples, batch_size: int = 16, config: AugmentConfig | None = None,
                    reapply_clahe: bool = True, **clahe_kw) -> BatchStream:
    return BatchStream(samples, batch_size, config, reapply_clahe, **clahe_kw)
