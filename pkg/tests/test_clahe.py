"""CLAHE against a loop-based per-tile histogram computation."""

import numpy as np
import pytest

from nanosynth.data import clahe
from nanosynth.errors import ConfigError

LEVEL = 2.0 / 255


def brute_force_lut(tile_levels, clip_limit):
    """Clipped histogram equalization for one tile, written with explicit loops."""
    n = len(tile_levels)
    hist = [0.0] * 256
    for v in tile_levels:
        hist[v] += 1
    limit = clip_limit * n / 256.0
    excess = 0.0
    for i in range(256):
        if hist[i] > limit:
            excess += hist[i] - limit
            hist[i] = limit
    hist = [h + excess / 256.0 for h in hist]
    lut, running = [], 0.0
    for i in range(256):
        lut.append(min(max((running + hist[i] / 2) * 256.0 / n - 0.5, 0.0), 255.0))
        running += hist[i]
    return lut


def to_levels(image):
    return np.clip(np.rint((image + 1) * 127.5), 0, 255).astype(int)


@pytest.mark.parametrize("value", [-1.0, -0.5, 0.0, 0.3, 1.0])
def test_constant_image_fixed_point(value):
    img = np.full((32, 32), value, np.float32)
    out = clahe(img, 2.0, (8, 8))
    assert np.ptp(out) < 1e-6
    assert abs(out[0, 0] - value) <= LEVEL + 1e-6


def test_constant_matches_flat_histogram_oracle():
    img = np.full((16, 16), 0.2, np.float32)
    level = to_levels(img)[0, 0]
    expected = brute_force_lut([level] * 16, 2.0)[level] / 127.5 - 1
    assert clahe(img, 2.0, (4, 4))[3, 3] == pytest.approx(expected, abs=1e-6)


def test_range_on_random_input(rng):
    for _ in range(5):
        out = clahe(rng.uniform(-1, 1, (37, 29)), rng.uniform(0.5, 10), (4, 3))
        assert out.min() >= -1 and out.max() <= 1 and out.shape == (37, 29)


def test_checkerboard_against_oracle():
    lo, hi = 0.0, 0.1
    board = np.where((np.indices((32, 32)).sum(axis=0) % 2) == 0, lo, hi).astype(np.float32)
    out = clahe(board, 2.0, (4, 4))
    levels = to_levels(board)
    tile = levels[:8, :8].ravel().tolist()
    lut = brute_force_lut(tile, 2.0)  # every tile has the same histogram
    a, b = lut[to_levels(np.float32(lo))] / 127.5 - 1, lut[to_levels(np.float32(hi))] / 127.5 - 1
    assert np.allclose(out[board == lo], a, atol=1e-6)
    assert np.allclose(out[board == hi], b, atol=1e-6)
    assert hi - lo < b - a <= 2.0


def test_matches_oracle_with_interpolation(rng):
    img = rng.uniform(-1, 1, (12, 12)).astype(np.float32)
    out = clahe(img, 3.0, (2, 2))
    levels = to_levels(img)
    luts = {(i, j): brute_force_lut(levels[6 * i:6 * i + 6, 6 * j:6 * j + 6].ravel().tolist(), 3.0)
            for i in range(2) for j in range(2)}
    for y in range(12):
        for x in range(12):
            fy, fx = y / 6 - 0.5, x / 6 - 0.5
            y0, x0 = int(np.floor(fy)), int(np.floor(fx))
            ay, ax = fy - y0, fx - x0
            ys = (min(max(y0, 0), 1), min(max(y0 + 1, 0), 1))
            xs = (min(max(x0, 0), 1), min(max(x0 + 1, 0), 1))
            v = levels[y, x]
            val = ((1 - ay) * ((1 - ax) * luts[ys[0], xs[0]][v] + ax * luts[ys[0], xs[1]][v])
                   + ay * ((1 - ax) * luts[ys[1], xs[0]][v] + ax * luts[ys[1], xs[1]][v]))
            assert out[y, x] == pytest.approx(val / 127.5 - 1, abs=1e-5)


def test_edge_padding_non_divisible(rng):
    out = clahe(rng.uniform(-1, 1, (10, 13)), 2.0, (3, 4))
    assert out.shape == (10, 13)


def test_rejects_bad_clip_limit():
    with pytest.raises(ConfigError):
        clahe(np.zeros((4, 4)), 0.0, (2, 2))
