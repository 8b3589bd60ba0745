"""Dataset I/O, synthetic phantoms and stratified splitting.

On-disk layout (real data and phantoms alike)::

    <root>/images/<id>.png|tif
    <root>/masks/<id>.png|tif
    <root>/phantom.json          # phantoms only: config, seeds, density tags
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
SIDECAR = "phantom.json"
DENSITY_TAGS = ("dense", "sparse")

# average cell statistics at the 512x768 working resolution
REFERENCE_CANVAS = (512, 768)
REFERENCE_CELL_AREA = 1206.43
REFERENCE_MINOR_AXIS = 29.39
REFERENCE_MAJOR_AXIS = 50.43


class DatasetError(Exception):
    pass


class MissingMaskError(DatasetError):
    def __init__(self, sample_id: str):
        super().__init__(f"no mask found for image {sample_id!r}")
        self.sample_id = sample_id


class PhantomPlacementError(DatasetError):
    pass


@dataclass
class SamplePair:
    image: np.ndarray  # (H, W, 1) float32 in [0, 1]
    mask: np.ndarray  # (H, W, 1) uint8 in {0, 1}
    id: str
    density_tag: str | None = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[..., None]
        if self.mask.ndim == 2:
            self.mask = self.mask[..., None]
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask is not binary")
        if self.density_tag is not None and self.density_tag not in DENSITY_TAGS:
            raise ValueError(f"{self.id}: unknown density tag {self.density_tag!r}")

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class SplitSpec:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhantomConfig:
    canvas: tuple[int, int] = REFERENCE_CANVAS
    n_cells: tuple[int, int] = (8, 16)
    cell_area: tuple[float, float] = (REFERENCE_CELL_AREA, 150.0)  # mean, std in px^2
    axis_ratio: float = REFERENCE_MINOR_AXIS / REFERENCE_MAJOR_AXIS
    tubule_count: tuple[int, int] = (0, 0)
    tubule_width: int = 5
    foreground_intensity: tuple[float, float] = (0.5, 0.9)
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    density_mode: str = "sparse"
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.n_cells = tuple(self.n_cells)
        self.cell_area = tuple(self.cell_area)
        self.tubule_count = tuple(self.tubule_count)
        self.foreground_intensity = tuple(self.foreground_intensity)
        if self.density_mode not in DENSITY_TAGS:
            raise ValueError(f"density_mode must be one of {DENSITY_TAGS}")
        if min(self.canvas) < 8:
            raise ValueError("canvas must be at least 8x8")
        if not 0 <= self.n_cells[0] <= self.n_cells[1]:
            raise ValueError("n_cells must be an ordered non-negative range")
        if not 0 <= self.tubule_count[0] <= self.tubule_count[1]:
            raise ValueError("tubule_count must be an ordered non-negative range")
        if self.cell_area[0] <= 0 or self.cell_area[1] < 0:
            raise ValueError("cell_area mean must be positive and std non-negative")
        if not 0 < self.axis_ratio <= 1:
            raise ValueError("axis_ratio is minor/major and must lie in (0, 1]")
        lo, hi = self.foreground_intensity
        if not 0 <= lo <= hi <= 1:
            raise ValueError("foreground_intensity must be a range inside [0, 1]")
        if self.tubule_width < 1 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("tubule_width must be >= 1 and sigmas non-negative")

    @classmethod
    def scaled(cls, canvas: tuple[int, int], **overrides) -> "PhantomConfig":
        """Reference cell statistics rescaled by canvas area."""
        ratio = canvas[0] * canvas[1] / (REFERENCE_CANVAS[0] * REFERENCE_CANVAS[1])
        area = REFERENCE_CELL_AREA * ratio
        return cls(**{"canvas": canvas, "cell_area": (area, area * 0.125), **overrides})

    @classmethod
    def toy(cls, **overrides) -> "PhantomConfig":
        """Small canvas with cells large enough to survive 15 px area filtering."""
        base = dict(canvas=(64, 96), n_cells=(2, 4), cell_area=(90.0, 15.0),
                    tubule_count=(1, 2), tubule_width=3, foreground_intensity=(0.45, 0.9),
                    noise_sigma=0.06, blur_sigma=0.7)
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)

    @property
    def mean_semi_axes(self) -> tuple[float, float]:
        major = math.sqrt(self.cell_area[0] / (math.pi * self.axis_ratio))
        return major, major * self.axis_ratio


MAX_REJECTIONS = 10_000


def _ellipse_mask(shape, center, a, b, theta) -> np.ndarray:
    out = np.zeros(shape, bool)
    r = math.ceil(a) + 1
    y0, y1 = max(0, int(center[0]) - r), min(shape[0], int(center[0]) + r + 2)
    x0, x1 = max(0, int(center[1]) - r), min(shape[1], int(center[1]) + r + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def _place_centers(cfg: PhantomConfig, rng: np.random.Generator, majors: np.ndarray) -> list:
    h, w = cfg.canvas
    mean_major, mean_minor = cfg.mean_semi_axes
    if cfg.density_mode == "sparse":
        min_dist = 2 * (2 * mean_major)  # two mean major-axis lengths
        clusters = None
    else:
        min_dist = 2 * mean_major  # one major-axis length: clustered, occasional overlap
        n_clusters = max(1, len(majors) // 4)
        clusters = []
    centers: list[tuple[float, float]] = []
    rejections = 0
    for a in majors:
        margin = math.ceil(a) + 1
        if 2 * margin >= min(h, w):
            raise PhantomPlacementError(f"cell with semi-axis {a:.1f}px does not fit canvas {cfg.canvas}")
        while True:
            new_cluster = clusters is not None and len(clusters) < n_clusters
            if clusters is None or new_cluster:
                cy, cx = rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)
            else:
                ky, kx = clusters[rng.integers(len(clusters))]
                cy, cx = rng.normal(ky, 2 * mean_major), rng.normal(kx, 2 * mean_major)
            inside = margin <= cy <= h - margin and margin <= cx <= w - margin
            if inside and all(math.hypot(cy - y, cx - x) >= min_dist for y, x in centers):
                centers.append((cy, cx))
                if new_cluster:
                    clusters.append((cy, cx))
                break
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise PhantomPlacementError(
                    f"could not place {len(majors)} cells on canvas {cfg.canvas} "
                    f"after {MAX_REJECTIONS} rejections")
    return centers


def _tubule(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.canvas
    canvas = np.zeros((h, w), np.uint8)
    step = max(2.0, min(h, w) / 8)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    angle = rng.uniform(0, 2 * math.pi)
    pts = [(x, y)]
    for _ in range(int(rng.integers(5, 10))):
        angle += rng.normal(0, 0.35)
        x = float(np.clip(x + step * math.cos(angle), 0, w - 1))
        y = float(np.clip(y + step * math.sin(angle), 0, h - 1))
        pts.append((x, y))
    poly = np.round(np.array(pts)).astype(np.int32).reshape(-1, 1, 2)
    cv2.polylines(canvas, [poly], isClosed=False, color=1, thickness=cfg.tubule_width)
    return canvas.astype(bool)


def generate_phantom(config: PhantomConfig, sample_id: str | None = None) -> SamplePair:
    """Deterministic synthetic image/mask pair; a pure function of ``config``."""
    rng = np.random.default_rng(config.seed)
    h, w = config.canvas
    n = int(rng.integers(config.n_cells[0], config.n_cells[1] + 1))
    mean_area, std_area = config.cell_area
    areas = np.clip(rng.normal(mean_area, std_area, n), 0.5 * mean_area, 1.5 * mean_area)
    majors = np.sqrt(areas / (math.pi * config.axis_ratio))
    centers = _place_centers(config, rng, majors)

    objects = [_ellipse_mask((h, w), c, a, a * config.axis_ratio, rng.uniform(0, math.pi))
               for c, a in zip(centers, majors)]
    n_tub = int(rng.integers(config.tubule_count[0], config.tubule_count[1] + 1))
    objects += [_tubule(config, rng) for _ in range(n_tub)]

    mask = np.zeros((h, w), bool)
    image = np.zeros((h, w), np.float64)
    lo, hi = config.foreground_intensity
    for obj in objects:
        mask |= obj
        image[obj] = np.maximum(image[obj], rng.uniform(lo, hi))
    if mask.mean() >= 0.5:
        raise PhantomPlacementError(f"foreground fraction {mask.mean():.2f} >= 0.5; reduce cell count or size")
    if config.noise_sigma > 0:
        image += rng.normal(0, config.noise_sigma, image.shape)
    if config.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, config.blur_sigma, mode="reflect")
    image = np.clip(image, 0, 1).astype(np.float32)
    return SamplePair(image, mask.astype(np.uint8), sample_id or f"phantom_{config.seed:06d}",
                      config.density_mode)


def phantom_dataset(config: PhantomConfig, n: int, dense_fraction: float = 0.5) -> list[SamplePair]:
    """``n`` phantoms with seeds ``config.seed + i``; the first share are dense."""
    n_dense = round(n * dense_fraction)
    out = []
    for i in range(n):
        cfg = replace(config, seed=config.seed + i, density_mode="dense" if i < n_dense else "sparse")
        out.append(generate_phantom(cfg, f"phantom_{config.seed + i:06d}"))
    return out


# ---------------------------------------------------------------- disk I/O

def _read_raster(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"cannot read image file {path}")
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr[..., :3], cv2.COLOR_BGR2GRAY) if arr.shape[2] >= 3 else arr[..., 0]
    return arr


def _dtype_max(arr: np.ndarray) -> float:
    if np.issubdtype(arr.dtype, np.integer):
        return float(np.iinfo(arr.dtype).max)
    return 1.0


def read_image(path) -> np.ndarray:
    """Grayscale raster scaled by its dtype range to float32 (H, W, 1) in [0, 1]."""
    arr = _read_raster(Path(path))
    return (arr.astype(np.float64) / _dtype_max(arr)).clip(0, 1).astype(np.float32)[..., None]


def _find(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def assign_density_tags(samples: list[SamplePair]) -> list[SamplePair]:
    """Dense if foreground fraction exceeds the dataset median, else sparse."""
    if not samples:
        return samples
    median = float(np.median([s.foreground_fraction for s in samples]))
    for s in samples:
        s.density_tag = "dense" if s.foreground_fraction > median else "sparse"
    return samples


def load_fnc(root, mask_threshold: float | None = None) -> list[SamplePair]:
    """Load ``images/`` + ``masks/`` pairs; masks binarised at ``value >= threshold``.

    The default threshold is half the dtype range rounded up (128 for 8-bit).
    """
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir():
        if root.is_dir() and not any(root.iterdir()):
            return []
        raise DatasetError(f"missing image directory {image_dir}")
    image_paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples = []
    for ip in image_paths:
        mp = _find(mask_dir, ip.stem)
        if mp is None:
            raise MissingMaskError(ip.stem)
        image = read_image(ip)
        msk = _read_raster(mp)
        if image.shape[:2] != msk.shape:
            raise DatasetError(f"{ip.stem}: image {image.shape[:2]} and mask {msk.shape} differ in size")
        thr = mask_threshold if mask_threshold is not None else math.ceil(_dtype_max(msk) / 2)
        samples.append(SamplePair(image, (msk >= thr).astype(np.uint8)[..., None], ip.stem))

    sidecar = root / SIDECAR
    tags = json.loads(sidecar.read_text()).get("density_tags", {}) if sidecar.exists() else {}
    if samples and all(s.id in tags for s in samples):
        for s in samples:
            s.density_tag = tags[s.id]
    else:
        assign_density_tags(samples)
    return samples


def save_dataset(samples: list[SamplePair], root, sidecar: dict | None = None) -> Path:
    """Write images as 16-bit PNG and masks as 8-bit {0,255} PNG."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img16 = np.round(s.image[..., 0].astype(np.float64) * 65535).astype(np.uint16)
        if not cv2.imwrite(str(root / "images" / f"{s.id}.png"), img16):
            raise OSError(f"cannot write {root / 'images' / s.id}.png")
        cv2.imwrite(str(root / "masks" / f"{s.id}.png"), s.mask[..., 0].astype(np.uint8) * 255)
    if sidecar is not None:
        payload = {**sidecar, "density_tags": {s.id: s.density_tag for s in samples}}
        (root / SIDECAR).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return root


# ---------------------------------------------------------------- splitting

def stratified_split(samples: list[SamplePair], fractions=(0.7, 0.15, 0.15), seed: int = 42) -> SplitSpec:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    strata: dict[str, list[str]] = {}
    for s in samples:
        if s.density_tag is None:
            raise ValueError(f"sample {s.id} has no density tag")
        strata.setdefault(s.density_tag, []).append(s.id)

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for tag in sorted(strata):
        ids = sorted(strata[tag])
        n = len(ids)
        if n < 3:
            raise ValueError(f"stratum {tag!r} has {n} samples; need at least 3 to fill three splits")
        n_val = max(1, round(n * fractions[1]))
        n_test = max(1, round(n * fractions[2]))
        n_train = n - n_val - n_test
        if n_train < 1:
            raise ValueError(f"stratum {tag!r} too small for fractions {fractions}")
        order = [ids[i] for i in rng.permutation(n)]
        train += order[:n_train]
        val += order[n_train:n_train + n_val]
        test += order[n_train + n_val:]
    return SplitSpec(train, val, test, seed)


def select(samples: list[SamplePair], ids: list[str]) -> list[SamplePair]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]
