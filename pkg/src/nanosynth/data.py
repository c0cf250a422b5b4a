"""Paired image/mask datasets: loading, splitting, augmentation and CLAHE."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DatasetError, ShapeError

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
N_LEVELS = 256


@dataclass
class SamplePair:
    """A registered grayscale image in [-1, 1] and a {0, 1} mask of the same size."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ShapeError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ShapeError(f"{self.id}: mask must contain only 0 and 1")
        if self.image.size and (self.image.min() < -1.0 or self.image.max() > 1.0):
            raise ShapeError(f"{self.id}: image values must lie in [-1, 1]")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def assignment(self):
        """Mapping id -> split name."""
        out = {}
        for name in ("train", "val", "test"):
            for p in getattr(self, name):
                out[p.id] = name
        return out


@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    clahe_enabled: bool = True
    clahe_clip_limit: float = 2.0
    clahe_tile_grid: tuple = (8, 8)
    random_crop_size: Optional[tuple] = None

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "vertical_flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.clahe_clip_limit <= 0:
            raise ConfigError(f"clahe_clip_limit must be positive, got {self.clahe_clip_limit}")
        if len(self.clahe_tile_grid) != 2 or min(self.clahe_tile_grid) < 1:
            raise ConfigError(f"clahe_tile_grid must be a positive pair, got {self.clahe_tile_grid}")
        if self.random_crop_size is not None and (len(self.random_crop_size) != 2 or min(self.random_crop_size) < 1):
            raise ConfigError(f"random_crop_size must be a positive pair, got {self.random_crop_size}")

    @classmethod
    def from_config(cls, data_config):
        return cls(
            horizontal_flip_prob=data_config.horizontal_flip_prob,
            vertical_flip_prob=data_config.vertical_flip_prob,
            clahe_enabled=data_config.clahe_enabled,
            clahe_clip_limit=data_config.clahe_clip_limit,
            clahe_tile_grid=tuple(data_config.clahe_tile_grid),
            random_crop_size=None if data_config.random_crop_size is None else tuple(data_config.random_crop_size),
        )

    def check_fits(self, shape):
        if self.random_crop_size is not None:
            ch, cw = self.random_crop_size
            if ch > shape[0] or cw > shape[1]:
                raise ConfigError(f"random_crop_size {self.random_crop_size} exceeds source size {tuple(shape)}")


# ---------------------------------------------------------------------------
# loading

def _full_scale(arr):
    if arr.dtype == np.bool_:
        return 1.0
    if arr.dtype == np.uint8:
        return 255.0
    if arr.dtype in (np.uint16, np.int16):
        return 65535.0
    if np.issubdtype(arr.dtype, np.integer):
        return 65535.0 if arr.max(initial=0) > 255 else 255.0
    return 1.0


def read_raster(path) -> np.ndarray:
    """Read a single-channel raster and scale it to [0, 1] by its full-scale value."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "P", "LA", "CMYK"):
                im = im.convert("L")
            arr = np.array(im)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DatasetError(f"unreadable raster {path}: {exc}") from None
    if arr.ndim != 2:
        raise DatasetError(f"unreadable raster {path}: expected a single-channel image, got shape {arr.shape}")
    return np.clip(arr.astype(np.float64) / _full_scale(arr), 0.0, 1.0).astype(np.float32)


def resize(arr: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a float raster to ``size=(H, W)``."""
    h, w = size
    if arr.shape == (h, w):
        return arr.astype(np.float32, copy=True)
    im = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32)


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(mask) > threshold).astype(np.float32)


def _index_folder(folder: Path):
    files = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            files[p.stem] = p
    return files


def load_dataset(root, image_size, mask_threshold: float = 0.5) -> list[SamplePair]:
    """Load ``<root>/images`` and ``<root>/masks`` as resized, normalized pairs sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (root, img_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing dataset directory: {d}")
    images, masks = _index_folder(img_dir), _index_folder(mask_dir)
    orphans = [f"images/{images[s].name}" for s in images if s not in masks]
    orphans += [f"masks/{masks[s].name}" for s in masks if s not in images]
    if orphans:
        raise DatasetError(f"files without a counterpart: {', '.join(orphans)}")
    if not images:
        raise DatasetError(f"empty dataset: no rasters under {root}")

    size = tuple(image_size)
    pairs = []
    for stem in sorted(images):
        img = resize(read_raster(images[stem]), size)
        mask = binarize(read_raster(masks[stem]), mask_threshold)
        mask = binarize(resize(mask, size), 0.5)
        img = np.clip(img * 2.0 - 1.0, -1.0, 1.0)
        pairs.append(SamplePair(stem, img, mask))
    return pairs


# ---------------------------------------------------------------------------
# splitting

def split_sizes(n: int):
    """(train, test, val) sizes; remainders go to train, every split nonempty."""
    if n < 3:
        raise DatasetError(f"need at least 3 pairs to split, got {n}")
    n_test = max(1, math.floor(0.2 * n))
    n_val = max(1, math.floor(0.1 * n))
    return n - n_test - n_val, n_test, n_val


def split_dataset(pairs: list[SamplePair], seed: int) -> DatasetSplit:
    n_train, n_test, n_val = split_sizes(len(pairs))
    ordered = sorted(pairs, key=lambda p: p.id)
    if len({p.id for p in ordered}) != len(ordered):
        raise DatasetError("duplicate sample ids")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    return DatasetSplit(
        train=shuffled[:n_train],
        test=shuffled[n_train:n_train + n_test],
        val=shuffled[n_train + n_test:],
        seed=seed,
    )


def write_split_manifest(split: DatasetSplit, path):
    lines = [f"{pid}\t{name}" for pid, name in sorted(split.assignment().items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_manifest(path, pairs: list[SamplePair], seed: int = -1) -> DatasetSplit:
    by_id = {p.id: p for p in pairs}
    groups = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            pid, name = line.split("\t")
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected 'id<TAB>split'") from None
        if name not in groups or pid not in by_id:
            raise DatasetError(f"{path}:{lineno}: unknown split or id in {line!r}")
        groups[name].append(by_id[pid])
    return DatasetSplit(seed=seed, **groups)


# ---------------------------------------------------------------------------
# CLAHE

def _quantize(image):
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, N_LEVELS - 1).astype(np.int64)


def _tile_lut(levels, clip_limit):
    n = levels.size
    hist = np.bincount(levels.ravel(), minlength=N_LEVELS).astype(np.float64)
    limit = clip_limit * n / N_LEVELS
    excess = np.clip(hist - limit, 0.0, None).sum()
    hist = np.minimum(hist, limit) + excess / N_LEVELS
    # midpoint CDF: a flat histogram maps every level onto itself
    cdf_mid = np.cumsum(hist) - 0.5 * hist
    return np.clip(cdf_mid * N_LEVELS / n - 0.5, 0.0, N_LEVELS - 1)


def clahe(image: np.ndarray, clip_limit: float = 2.0, tile_grid=(8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of an image in [-1, 1].

    The image is quantized to 256 levels. Each tile of an edge-padded grid gets
    a clipped-histogram mapping, and pixels bilinearly blend the mappings of the
    four nearest tile centres.
    """
    if clip_limit <= 0:
        raise ConfigError(f"clip_limit must be positive, got {clip_limit}")
    gy, gx = (int(t) for t in tile_grid)
    if gy < 1 or gx < 1:
        raise ConfigError(f"tile_grid must be positive, got {tile_grid}")
    levels = _quantize(image)
    h, w = levels.shape
    th, tw = math.ceil(h / gy), math.ceil(w / gx)
    padded = np.pad(levels, ((0, th * gy - h), (0, tw * gx - w)), mode="edge")

    luts = np.empty((gy, gx, N_LEVELS))
    for i in range(gy):
        for j in range(gx):
            luts[i, j] = _tile_lut(padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip_limit)

    fy = np.arange(h) / th - 0.5
    fx = np.arange(w) / tw - 0.5
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    ay = (fy - y0)[:, None]
    ax = (fx - x0)[None, :]
    y1, x1 = np.clip(y0 + 1, 0, gy - 1), np.clip(x0 + 1, 0, gx - 1)
    y0, x0 = np.clip(y0, 0, gy - 1), np.clip(x0, 0, gx - 1)
    Y0, X0, Y1, X1 = y0[:, None], x0[None, :], y1[:, None], x1[None, :]
    top = luts[Y0, X0, levels] * (1 - ax) + luts[Y0, X1, levels] * ax
    bottom = luts[Y1, X0, levels] * (1 - ax) + luts[Y1, X1, levels] * ax
    out = top * (1 - ay) + bottom * ay
    return np.clip(out / 127.5 - 1.0, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation

def hflip(pair: SamplePair) -> SamplePair:
    return replace(pair, image=pair.image[:, ::-1].copy(), mask=pair.mask[:, ::-1].copy())


def vflip(pair: SamplePair) -> SamplePair:
    return replace(pair, image=pair.image[::-1, :].copy(), mask=pair.mask[::-1, :].copy())


def augment(pair: SamplePair, policy: AugmentationPolicy, rng: np.random.Generator) -> SamplePair:
    """Random flips and crop applied jointly; CLAHE on the image only.

    Crops are resized back to the source size so raster shapes never change.
    The same draws are consumed from ``rng`` regardless of outcome, keeping
    the random stream aligned across policies.
    """
    policy.check_fits(pair.shape)
    u_h, u_v = rng.random(2)
    out = pair
    if u_h < policy.horizontal_flip_prob:
        out = hflip(out)
    if u_v < policy.vertical_flip_prob:
        out = vflip(out)
    if policy.random_crop_size is not None:
        h, w = out.shape
        ch, cw = policy.random_crop_size
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = resize(out.image[top:top + ch, left:left + cw], (h, w))
        mask = binarize(resize(out.mask[top:top + ch, left:left + cw], (h, w)), 0.5)
        out = SamplePair(out.id, np.clip(img, -1.0, 1.0), mask)
    if policy.clahe_enabled:
        out = replace(out, image=clahe(out.image, policy.clahe_clip_limit, policy.clahe_tile_grid))
    return out


def stack_batch(pairs):
    """Stack pairs into (B, 1, H, W) float arrays (images, masks)."""
    images = np.stack([p.image for p in pairs])[:, None]
    masks = np.stack([p.mask for p in pairs])[:, None]
    return images, masks
