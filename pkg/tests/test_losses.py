import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nanosynth.config import LossConfig
from nanosynth.errors import ExtractorUnavailableError, ShapeError
from nanosynth.extractors import RandomConvExtractor
from nanosynth.losses import (binary_ce, cycle_losses, dice_loss, focal_ce, focal_tversky_loss, l1_loss,
                              lsgan_loss, perceptual_loss, segmentation_loss, tversky_loss)

D = torch.float64


def rand_maps(seed, shape=(4, 4)):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(shape, generator=g, dtype=D) * 0.98 + 0.01
    target = (torch.rand(shape, generator=g, dtype=D) > 0.5).to(D)
    return pred, target


def test_focal_perfect_prediction():
    target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    assert focal_ce(target.clone(), target, 0.25, 2.0) <= 0.25 * 1e-7


def test_focal_single_pixel_value():
    # 0.25 * (1 - 0.5)^2 * -ln(0.5)
    value = focal_ce(torch.tensor([0.5], dtype=D), torch.tensor([1.0], dtype=D), 0.25, 2.0)
    assert float(value) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert float(value) == pytest.approx(0.043321, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_focal_gamma0_is_bce(seed):
    pred, target = rand_maps(seed, (5, 7))
    bce = -(target * torch.log(pred) + (1 - target) * torch.log(1 - pred)).mean()
    assert abs(float(focal_ce(pred, target, 1.0, 0.0) - bce)) < 1e-10
    assert abs(float(binary_ce(pred, target) - bce)) < 1e-10


@pytest.mark.parametrize("alpha_t,gamma", [(0.25, 2.0), (1.0, 0.0), (0.5, 0.75), (0.9, 5.0)])
def test_focal_monotone_in_pt(alpha_t, gamma):
    grid = torch.linspace(1e-6, 1 - 1e-6, 2001, dtype=D)
    values = torch.stack([focal_ce(p.view(1), torch.ones(1, dtype=D), alpha_t, gamma) for p in grid])
    assert (values[1:] <= values[:-1] + 1e-15).all()


def test_tversky_examples():
    t = torch.tensor([1.0, 0.0], dtype=D)
    assert float(tversky_loss(t.clone(), t, 0.4, 0.6, 1.0)) == 0.0
    # TP=2, FP=1, FN=1 from hard maps
    target = torch.tensor([1, 1, 1, 0], dtype=D)
    pred = torch.tensor([1, 1, 0, 1], dtype=D)
    assert float(tversky_loss(pred, target, 0.4, 0.6, 0.0)) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), smooth=st.floats(0.0, 2.0))
def test_tversky_half_half_is_dice(seed, smooth):
    pred, target = rand_maps(seed, (6, 6))
    tp, fp, fn = (pred * target).sum(), (pred * (1 - target)).sum(), ((1 - pred) * target).sum()
    dice = 1 - (2 * tp + 2 * smooth) / (2 * tp + fp + fn + 2 * smooth)
    assert abs(float(tversky_loss(pred, target, 0.5, 0.5, smooth) - dice)) < 1e-10
    assert abs(float(dice_loss(pred, target, smooth) - dice)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), alpha=st.floats(0.05, 1), beta=st.floats(0.05, 1))
def test_tversky_range_and_fp_fn_monotone(seed, alpha, beta):
    pred, target = rand_maps(seed, (4, 4))
    base = float(tversky_loss(pred, target, alpha, beta, 1.0))
    assert 0.0 <= base <= 1.0
    bg, fg = target == 0, target == 1
    if bg.any():
        more_fp = torch.where(bg, (pred + 0.5).clamp(max=1), pred)
        if (more_fp != pred).any():
            assert float(tversky_loss(more_fp, target, alpha, beta, 1.0)) > base
    if fg.any():
        more_fn = torch.where(fg, (pred - 0.5).clamp(min=0), pred)
        if (more_fn != pred).any():
            assert float(tversky_loss(more_fn, target, alpha, beta, 1.0)) > base


def test_focal_tversky_exponent():
    pred, target = rand_maps(3)
    tv = tversky_loss(pred, target, 0.3, 0.7, 1.0)
    assert float(focal_tversky_loss(pred, target, 0.3, 0.7, 0.75, 1.0)) == pytest.approx(float(tv) ** 0.75)


def test_segmentation_loss_weights_and_linearity():
    pred, target = rand_maps(9)
    a = float(focal_ce(pred, target, 0.25, 2.0))
    b = float(tversky_loss(pred, target, 0.4, 0.6, 1.0))
    assert float(segmentation_loss(pred, target, LossConfig(lambda1=1, lambda2=0))) == pytest.approx(a, abs=1e-12)
    assert float(segmentation_loss(pred, target, LossConfig())) == pytest.approx(a + b, abs=1e-12)
    for l1, l2 in [(0.3, 2.0), (5.0, 0.1)]:
        assert float(segmentation_loss(pred, target, LossConfig(lambda1=l1, lambda2=l2))) == pytest.approx(
            l1 * a + l2 * b, abs=1e-12)
    assert float(segmentation_loss(target.clone(), target, LossConfig())) < 1e-6


def test_segmentation_loss_variants():
    pred, target = rand_maps(4)
    cfg = LossConfig(classification="ce", overlap="dice")
    expected = binary_ce(pred, target) + dice_loss(pred, target, 1.0)
    assert float(segmentation_loss(pred, target, cfg)) == pytest.approx(float(expected))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        focal_ce(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ShapeError):
        tversky_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ShapeError):
        l1_loss(torch.zeros(3), torch.zeros(4))


class LinearStub(torch.nn.Module):
    layers = ("identity",)

    def forward(self, x):
        return {"identity": 1.0 * x}


def test_perceptual_loss():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 1, 8, 8, generator=g, dtype=D) * 2 - 1
    y = torch.rand(1, 1, 8, 8, generator=g, dtype=D) * 2 - 1
    ext = RandomConvExtractor().to(D)
    assert float(perceptual_loss(x, x, ext)) == 0.0
    assert float(perceptual_loss(x, y, ext)) == pytest.approx(float(perceptual_loss(y, x, ext)), abs=1e-15)
    assert float(perceptual_loss(2 * x, x, LinearStub())) == pytest.approx(float(x.abs().mean()), abs=1e-15)
    with pytest.raises(ExtractorUnavailableError, match="fallback"):
        perceptual_loss(x, y, None)


def test_l1_examples():
    x = torch.zeros(4, 4, dtype=D)
    assert float(l1_loss(x, x)) == 0.0
    assert float(l1_loss(x + 0.5, x)) == 0.5
    y = x.clone()
    y[1, 2] = 1.0
    assert float(l1_loss(y, x)) == pytest.approx(1 / 16)


def test_lsgan_examples():
    assert float(lsgan_loss(torch.ones(3, 3), 1)) == 0.0
    assert float(lsgan_loss(torch.zeros(3, 3), 1)) == 1.0
    assert float(lsgan_loss(torch.full((3, 3), 0.5), 1)) == 0.25


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), label=st.sampled_from([0.0, 1.0]))
def test_lsgan_nonnegative_zero_iff_equal(seed, label):
    scores = torch.randn(5, 5, generator=torch.Generator().manual_seed(seed), dtype=D)
    assert float(lsgan_loss(scores, label)) > 0
    assert float(lsgan_loss(torch.full((5, 5), label, dtype=D), label)) == 0


def test_cycle_losses():
    cfg = LossConfig()
    mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=D)
    img = torch.rand(2, 2, dtype=D)
    m, i = cycle_losses(mask, mask.clone(), img, img.clone(), cfg)
    assert float(m) < 1e-6 and float(i) == 0.0
    m, i = cycle_losses(mask, mask.clone(), img, img + 0.1, cfg)
    assert float(i) == pytest.approx(0.1)
    assert float(m) < 1e-6


LOSS_FNS = {
    "focal_ce": lambda p, t: focal_ce(p, t, 0.25, 2.0),
    "bce": binary_ce,
    "tversky": lambda p, t: tversky_loss(p, t, 0.4, 0.6, 1.0),
    "focal_tversky": lambda p, t: focal_tversky_loss(p, t, 0.3, 0.7, 0.75, 1.0),
    "dice": dice_loss,
    "segmentation": lambda p, t: segmentation_loss(p, t, LossConfig()),
    "l1": lambda p, t: l1_loss(p, t * 0.7 + 0.1),
    "lsgan": lambda p, t: lsgan_loss(p, 1.0),
    "perceptual": lambda p, t: perceptual_loss(p[None, None], t[None, None] * 0.5, RandomConvExtractor().to(D)),
}


@pytest.mark.parametrize("name", sorted(LOSS_FNS))
def test_gradients_match_finite_differences(name):
    from gradcheck import max_relative_error

    pred, target = rand_maps(17)
    err = max_relative_error(lambda p: LOSS_FNS[name](p, target), pred)
    assert err < 1e-4, f"{name}: relative error {err:.2e}"
