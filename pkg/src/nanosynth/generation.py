"""Inference services: synthesis, segmentation, synthetic masks and post-processing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy import ndimage, signal
from skimage.draw import ellipse

from .errors import ConfigError, DensityError, ShapeError


@dataclass(frozen=True)
class MaskSynthesisSpec:
    canvas: tuple = (256, 256)
    particle_count_range: tuple = (20, 40)
    radius_range: tuple = (6.0, 14.0)
    ellipticity_range: tuple = (0.0, 0.4)
    overlap_allowed: bool = False
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        (h, w), (n0, n1), (r0, r1), (e0, e1) = (self.canvas, self.particle_count_range, self.radius_range,
                                                  self.ellipticity_range)
        if h < 1 or w < 1:
            raise ConfigError(f"canvas must be positive, got {self.canvas}")
        if not 0 <= n0 <= n1:
            raise ConfigError(f"particle_count_range must be ordered and non-negative, got {self.particle_count_range}")
        if not 0 < r0 <= r1:
            raise ConfigError(f"radius_range must be ordered and positive, got {self.radius_range}")
        if not 0 <= e0 <= e1 < 1:
            raise ConfigError(f"ellipticity_range must be ordered within [0, 1), got {self.ellipticity_range}")
        # the largest particle must fit inside the canvas
        if 2 * r1 / np.sqrt(1 - e1) + 2 > min(h, w):
            raise ConfigError(f"radius_range {self.radius_range} too large for canvas {self.canvas}")

    @classmethod
    def for_canvas(cls, canvas, seed=0, density=1.0):
        """Defaults scaled from a 256 x 256 canvas: radii by side length, counts by area."""
        s = min(canvas) / 256
        lo, hi = 20 * s * s * density, 40 * s * s * density
        return cls(canvas=tuple(canvas), particle_count_range=(max(int(round(lo)), 1), max(int(round(hi)), 1)),
                   radius_range=(max(6 * s, 1.0), max(14 * s, 1.0)), seed=seed)


@dataclass(frozen=True)
class PostProcessSpec:
    brightness_shift: float = 0.0
    exposure_gain: float = 1.0
    shadow_lift: float = 0.0
    highlight_cut: float = 0.0

    def __post_init__(self):
        if not -1 <= self.brightness_shift <= 1:
            raise ConfigError(f"brightness_shift must be in [-1, 1], got {self.brightness_shift}")
        if self.exposure_gain <= 0:
            raise ConfigError(f"exposure_gain must be positive, got {self.exposure_gain}")
        for name in ("shadow_lift", "highlight_cut"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")

    @property
    def is_identity(self):
        return self == PostProcessSpec()


def _model_dtype(net):
    return next(net.parameters()).dtype


def _check_size(shape, net):
    expected = getattr(net, "image_size", None)
    if expected is not None and tuple(shape) != tuple(expected):
        raise ShapeError(f"input size {tuple(shape)} does not match the model's image_size {tuple(expected)}")


def latent_for_seed(seed: int, latent_dim: int, dtype=torch.float32):
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(1, latent_dim, generator=gen, dtype=dtype)


def generate(mask, generator, z=None, seed: int = 0) -> np.ndarray:
    """Render one H x W image in [-1, 1] for a binary mask; ``seed`` fixes z (unless given) and the noise."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    _check_size(mask.shape, generator)
    dtype = _model_dtype(generator)
    if z is None:
        z = latent_for_seed(seed, generator.latent_dim, dtype)
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1)
    with torch.no_grad():
        out = generator(torch.from_numpy(mask).to(dtype)[None, None], z, noise_seed=seed + 1)
    return out[0, 0].float().numpy()


def segment(image, segmenter, threshold: float = 0.5) -> np.ndarray:
    """Binary {0, 1} mask: foreground where the predicted probability is >= threshold."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {image.shape}")
    _check_size(image.shape, segmenter)
    with torch.no_grad():
        probs = segmenter(torch.from_numpy(image).to(_model_dtype(segmenter))[None, None])
    return (probs[0, 0] >= threshold).float().numpy()


def _place(mask, rng, spec, allow_overlap):
    """Draw one particle shape and put it at a uniformly chosen position where it fits.

    Sampling among the feasible positions is what per-position rejection converges to,
    without wasting the retry budget on blind draws.  Returns False when the drawn shape
    fits nowhere, which counts as one retry.
    """
    h, w = mask.shape
    r = rng.uniform(*spec.radius_range)
    e = rng.uniform(*spec.ellipticity_range)
    # equal-area ellipse: semi-axes r/sqrt(1-e) and r*sqrt(1-e)
    a, b = r / np.sqrt(1 - e), r * np.sqrt(1 - e)
    theta = rng.uniform(0, np.pi)
    fy, fx = rng.uniform(0, 1, 2)
    half = int(np.ceil(a)) + 1
    rr, cc = ellipse(half + fy, half + fx, a, b, shape=(2 * half + 2, 2 * half + 2), rotation=theta)
    if rr.size == 0:
        return False
    rr, cc = rr - rr.min(), cc - cc.min()
    fh, fw = rr.max() + 1, cc.max() + 1
    if fh + 2 > h or fw + 2 > w:
        return False
    if allow_overlap:
        free = np.ones((h - fh - 1, w - fw - 1), bool)
    else:
        foot = np.zeros((fh, fw))
        foot[rr, cc] = 1.0
        # keep a one-pixel gap so particles stay separate components
        grown = ndimage.binary_dilation(mask > 0, structure=np.ones((3, 3), bool)).astype(float)
        hits = signal.fftconvolve(grown, foot[::-1, ::-1], mode="valid")
        # offsets 1 .. size-1-extent keep a one-pixel margin to the canvas border
        free = hits[1:h - fh, 1:w - fw] < 0.5
    spots = np.flatnonzero(free)
    if spots.size == 0:
        return False
    oy, ox = np.unravel_index(spots[rng.integers(spots.size)], free.shape)
    mask[rr + oy + 1, cc + ox + 1] = 1.0
    return True


def synthesize_masks(spec: MaskSynthesisSpec, count: int) -> list[np.ndarray]:
    """Random ellipse-particle masks; reproducible from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    masks = []
    for _ in range(count):
        mask = np.zeros(spec.canvas, dtype=np.float32)
        n = int(rng.integers(spec.particle_count_range[0], spec.particle_count_range[1] + 1))
        placed = 0
        for _ in range(n):
            for _attempt in range(spec.max_retries):
                if _place(mask, rng, spec, spec.overlap_allowed):
                    placed += 1
                    break
            else:
                raise DensityError(
                    f"could only place {placed} of {n} disjoint particles on a {spec.canvas} canvas "
                    f"within {spec.max_retries} retries", achieved=placed)
        masks.append(mask)
    return masks


_CURVE_GAIN = 2.0 / 3.0  # largest factor keeping the tone curves monotone for lift/cut up to 1


def post_process(image, spec: PostProcessSpec) -> np.ndarray:
    """Exposure gain, brightness shift, shadow lift and highlight cut, computed in [0, 1]."""
    v = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    v = np.clip(v * spec.exposure_gain, 0.0, 1.0)
    v = np.clip(v + spec.brightness_shift, 0.0, 1.0)
    v = v + spec.shadow_lift * (1 - v) * np.maximum(0.0, 0.5 - v) * _CURVE_GAIN
    v = v - spec.highlight_cut * v * np.maximum(0.0, v - 0.5) * _CURVE_GAIN
    return np.clip(v * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# raster output

def to_uint8(image) -> np.ndarray:
    """[-1, 1] -> [0, 255] with round-half-even."""
    v = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((v + 1.0) * 127.5).astype(np.uint8)


def save_image(path, image):
    Image.fromarray(to_uint8(image), mode="L").save(path)


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def parse_synthesis_args(tokens, defaults: Optional[MaskSynthesisSpec] = None):
    """Parse ``key=value`` tokens (``count=3 canvas=64x64 radius=4:8 ...``) into (spec, count)."""
    base = defaults or MaskSynthesisSpec()
    kwargs = dict(canvas=base.canvas, particle_count_range=base.particle_count_range,
                  radius_range=base.radius_range, ellipticity_range=base.ellipticity_range,
                  overlap_allowed=base.overlap_allowed, seed=base.seed, max_retries=base.max_retries)
    count = 1
    aliases = {"particles": "particle_count_range", "radius": "radius_range", "ellipticity": "ellipticity_range",
               "overlap": "overlap_allowed"}

    def pair(text, cast):
        for sep in ("x", ":", ","):
            if sep in text:
                a, b = text.split(sep, 1)
                return cast(a), cast(b)
        return cast(text), cast(text)

    for token in tokens:
        for item in token.split(","):
            if not item:
                continue
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--synthesize: expected key=value, got {item!r}")
            key = aliases.get(key, key)
            if key == "count":
                count = int(value)
            elif key in ("canvas", "particle_count_range"):
                kwargs[key] = pair(value, int)
            elif key in ("radius_range", "ellipticity_range"):
                kwargs[key] = pair(value, float)
            elif key == "overlap_allowed":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif key in ("seed", "max_retries"):
                kwargs[key] = int(value)
            else:
                raise ConfigError(f"--synthesize: unknown key {key!r}")
    if count < 0:
        raise ConfigError("--synthesize: count must be >= 0")
    return MaskSynthesisSpec(**kwargs), count
