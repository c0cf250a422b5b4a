"""Procedural stand-in for SEM data: ellipse masks with shaded particles on a noisy background."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import SamplePair
from .generation import MaskSynthesisSpec, save_image, save_mask, synthesize_masks


def toy_mask_spec(size=64, seed=0, density=1.0) -> MaskSynthesisSpec:
    """Mask spec used for toy data; ``density`` scales the particle count range."""
    lo, hi = 3, 6
    return MaskSynthesisSpec(
        canvas=(size, size),
        particle_count_range=(int(round(lo * density)), int(round(hi * density))),
        radius_range=(size / 16, size / 9),
        ellipticity_range=(0.0, 0.4),
        overlap_allowed=False,
        seed=seed,
    )


def render_particles(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Grayscale image in [-1, 1]: dark textured background, bright dome-shaded particles with halos."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    background = -0.55 + 0.15 * (np.cos(angle) * xx + np.sin(angle) * yy)
    background += ndimage.gaussian_filter(rng.normal(0, 0.25, (h, w)), 2.0)
    fg = mask > 0.5
    dist = ndimage.distance_transform_edt(fg)
    labels, n = ndimage.label(fg)
    shade = np.zeros_like(dist)
    for k in range(1, n + 1):
        region = labels == k
        shade[region] = np.sqrt(dist[region] / dist[region].max())
    particles = 0.05 + 0.6 * shade
    halo = ndimage.gaussian_filter(fg.astype(float), 1.5) * (~fg) * 0.6
    img = np.where(fg, particles, background + halo)
    img = ndimage.gaussian_filter(img, 0.6) + rng.normal(0, 0.03, (h, w))
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def make_toy_pairs(n=16, size=64, seed=0, density=1.0) -> list[SamplePair]:
    masks = synthesize_masks(toy_mask_spec(size, seed, density), n)
    rng = np.random.default_rng(seed + 7919)
    return [SamplePair(f"toy_{i:03d}", render_particles(m, rng), m) for i, m in enumerate(masks)]


def write_dataset(pairs, root) -> Path:
    """Write pairs in the ``images/`` + ``masks/`` layout read by :func:`nanosynth.data.load_dataset`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        save_image(root / "images" / f"{p.id}.png", p.image)
        save_mask(root / "masks" / f"{p.id}.png", p.mask)
    return root


def toy_model_config(size=64):
    """Small network sizes that train in minutes on one CPU core."""
    from .config import ModelConfig

    return ModelConfig(image_size=(size, size), unet_depth=3, unet_width=16, latent_dim=32, style_dim=32,
                       mapping_layers=2, disc_layers=3, disc_width=16)


def cycle_smoke(seed=0, steps=200, n_pairs=16, size=64, data_seed=0, loss_config=None, policy=None,
                model_config=None, log_every=0):
    """Train from scratch on toy pairs for ``steps`` updates.

    Returns per-step ``generator_total`` values, whether every loss stayed finite,
    and the mean SSIM of G(mask) vs the paired image before and after training.
    """
    from .config import DataConfig, LossConfig, TrainingConfig
    from .data import AugmentationPolicy, augment
    from .evaluation import evaluate_model
    from .extractors import get_extractor
    from .training import init_state, train_step

    pairs = make_toy_pairs(n_pairs, size, seed=data_seed)
    loss_config = loss_config or LossConfig()
    policy = policy or AugmentationPolicy.from_config(DataConfig())
    cfg = TrainingConfig(seed=seed)
    state = init_state(model_config or toy_model_config(size), cfg)
    extractor = get_extractor("fallback")

    def mean_ssim():
        return evaluate_model(pairs, state.generator, seed, extractor).ssim_mean

    before = mean_ssim()
    totals, finite = [], True
    per_epoch = len(pairs) // cfg.batch_size
    order = None
    for step in range(steps):
        if step % per_epoch == 0:
            order = state.np_rng.permutation(len(pairs))
        k = step % per_epoch
        batch = [augment(pairs[j], policy, state.np_rng) for j in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
        _, report = train_step(batch, state, loss_config, cfg, extractor)
        finite &= all(np.isfinite(v) for v in report.values.values())
        totals.append(report.values["generator_total"])
        if log_every and (step + 1) % log_every == 0:
            print(f"seed {seed} step {step + 1}: generator_total {totals[-1]:.4f}", flush=True)
    return {"seed": seed, "generator_total": totals, "finite": finite, "ssim_before": before,
            "ssim_after": mean_ssim()}
