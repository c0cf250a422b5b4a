"""Training objectives as pure differentiable functions of tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import LossConfig
from .errors import ExtractorUnavailableError, ShapeError

PROB_EPS = 1e-7

__all__ = [
    "LossConfig", "LossReport", "focal_ce", "binary_ce", "tversky_loss", "focal_tversky_loss", "dice_loss",
    "segmentation_loss", "perceptual_loss", "l1_loss", "lsgan_loss", "cycle_losses",
]


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _p_true(pred, target):
    pred = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    return target * pred + (1 - target) * (1 - pred)


def focal_ce(pred, target, alpha_t=0.25, gamma=2.0):
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t), p_t the probability of the true class."""
    _same_shape(pred, target, "focal_ce")
    p_t = _p_true(pred, target)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def binary_ce(pred, target):
    _same_shape(pred, target, "binary_ce")
    return -torch.log(_p_true(pred, target)).mean()


def _soft_counts(pred, target):
    tp = (pred * target).sum()
    fp = (pred * (1 - target)).sum()
    fn = ((1 - pred) * target).sum()
    return tp, fp, fn


def tversky_loss(pred, target, alpha=0.4, beta=0.6, smooth=1.0):
    """1 - (TP + smooth) / (TP + alpha FP + beta FN + smooth) with soft counts."""
    _same_shape(pred, target, "tversky_loss")
    tp, fp, fn = _soft_counts(pred, target)
    return 1 - (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)


def focal_tversky_loss(pred, target, alpha=0.3, beta=0.7, gamma=0.75, smooth=1.0):
    return tversky_loss(pred, target, alpha, beta, smooth).clamp_min(0) ** gamma


def dice_loss(pred, target, smooth=1.0):
    """Soft Dice loss, 1 - (2 TP + s') / (2 TP + FP + FN + s') with s' = 2 smooth."""
    _same_shape(pred, target, "dice_loss")
    tp, fp, fn = _soft_counts(pred, target)
    return 1 - (2 * tp + 2 * smooth) / (2 * tp + fp + fn + 2 * smooth)


def classification_term(pred, target, config: LossConfig):
    if config.classification == "focal":
        return focal_ce(pred, target, config.alpha_t, config.gamma)
    return binary_ce(pred, target)


def overlap_term(pred, target, config: LossConfig):
    if config.overlap == "dice":
        return dice_loss(pred, target, config.smooth)
    if config.overlap == "focal_tversky":
        return focal_tversky_loss(pred, target, config.tversky_alpha, config.tversky_beta, config.tversky_gamma,
                                  config.smooth)
    return tversky_loss(pred, target, config.tversky_alpha, config.tversky_beta, config.smooth)


def segmentation_loss(pred, target, config: LossConfig):
    return (config.lambda1 * classification_term(pred, target, config)
            + config.lambda2 * overlap_term(pred, target, config))


def perceptual_loss(generated, real, extractor, layer_set=None):
    """Sum over layers of the mean absolute feature difference."""
    if extractor is None:
        raise ExtractorUnavailableError("no feature extractor given; use the 'fallback' extractor for offline runs")
    _same_shape(generated, real, "perceptual_loss")
    layer_set = layer_set or extractor.layers
    fg, fr = extractor(generated), extractor(real)
    return sum((fg[name] - fr[name]).abs().mean() for name in layer_set)


def l1_loss(generated, real):
    _same_shape(generated, real, "l1_loss")
    return (generated - real).abs().mean()


def lsgan_loss(scores, target_label):
    return ((scores - float(target_label)) ** 2).mean()


def cycle_losses(original_mask, reconstructed_mask_probs, original_image, reconstructed_image, config: LossConfig,
                 extractor=None):
    """(mask_cycle, image_cycle): segmentation loss on the mask cycle, L1 (+ optional perceptual) on the image cycle."""
    _same_shape(original_mask, reconstructed_mask_probs, "cycle_losses mask")
    _same_shape(original_image, reconstructed_image, "cycle_losses image")
    mask_cycle = segmentation_loss(reconstructed_mask_probs, original_mask, config)
    image_cycle = l1_loss(reconstructed_image, original_image)
    if config.weight_cycle_perceptual > 0:
        image_cycle = image_cycle + config.weight_cycle_perceptual * perceptual_loss(
            reconstructed_image, original_image, extractor)
    return mask_cycle, image_cycle


@dataclass
class LossReport:
    """Scalar losses from one training step, keyed by name."""

    values: dict = field(default_factory=dict)

    ADVERSARIAL = ("adv_image", "adv_mask")

    def __getitem__(self, key):
        return self.values[key]

    def items(self):
        return self.values.items()

    def check(self):
        for name, v in self.values.items():
            if v != v or v in (float("inf"), float("-inf")):
                return name
            if v < 0 and name not in self.ADVERSARIAL:
                return name
        return None
