import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import random_pair
from nanosynth.data import (AugmentationPolicy, SamplePair, augment, binarize, hflip, load_dataset,
                            read_split_manifest, split_dataset, split_sizes, vflip, write_split_manifest)
from nanosynth.errors import ConfigError, DatasetError, ShapeError


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def folder(tmp_path, rng):
    for name in ("b", "a", "c"):
        _write(tmp_path / "images" / f"{name}.png", rng.integers(0, 256, (20, 24), dtype=np.uint8))
        _write(tmp_path / "masks" / f"{name}.png", (rng.random((20, 24)) > 0.5).astype(np.uint8) * 255)
    return tmp_path


def test_load_three_pairs(folder):
    pairs = load_dataset(folder, (16, 16))
    assert [p.id for p in pairs] == ["a", "b", "c"]
    for p in pairs:
        assert p.image.shape == p.mask.shape == (16, 16)
        assert p.image.min() >= -1 and p.image.max() <= 1
        assert set(np.unique(p.mask)) <= {0.0, 1.0}


def test_mask_gray_200_becomes_foreground(tmp_path):
    mask = np.zeros((8, 8), np.uint8)
    mask[3, 4] = 200
    _write(tmp_path / "images" / "x.png", np.full((8, 8), 90, np.uint8))
    _write(tmp_path / "masks" / "x.png", mask)
    (pair,) = load_dataset(tmp_path, (8, 8))
    assert pair.mask[3, 4] == 1.0
    assert pair.mask.sum() == 1.0
    assert pair.image[0, 0] == pytest.approx(90 / 255 * 2 - 1, abs=1e-6)


def test_sixteen_bit_tif(tmp_path):
    _write(tmp_path / "images" / "t.tif", np.full((8, 8), 65535, np.uint16))
    _write(tmp_path / "masks" / "t.png", np.zeros((8, 8), np.uint8))
    (pair,) = load_dataset(tmp_path, (8, 8))
    assert np.allclose(pair.image, 1.0)


def test_orphan_reported(folder):
    _write(folder / "images" / "orphan.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(DatasetError, match="orphan.png"):
        load_dataset(folder, (8, 8))


def test_unreadable_raster_named(folder):
    (folder / "images" / "a.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="a.png"):
        load_dataset(folder, (8, 8))


def test_empty_dataset(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path, (8, 8))


def test_sample_pair_invariants(rng):
    with pytest.raises(ShapeError):
        SamplePair("x", np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        SamplePair("x", np.zeros((4, 4)), np.full((4, 4), 0.5))
    with pytest.raises(ShapeError):
        SamplePair("x", np.full((4, 4), 1.5), np.zeros((4, 4)))


def _pairs(n, rng):
    return [random_pair(rng, f"p{i:03d}", (4, 4)) for i in range(n)]


def test_split_sizes_examples(rng):
    s = split_dataset(_pairs(10, rng), seed=7)
    assert (len(s.train), len(s.test), len(s.val)) == (7, 2, 1)
    s2 = split_dataset(_pairs(10, np.random.default_rng(0)), seed=7)
    assert s.assignment() == s2.assignment()
    assert split_sizes(100) == (70, 20, 10)


def test_split_too_small(rng):
    with pytest.raises(DatasetError):
        split_dataset(_pairs(2, rng), seed=0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(3, 120), seed=st.integers(0, 2 ** 32 - 1))
def test_split_disjoint_and_exhaustive(n, seed):
    pairs = [SamplePair(f"id{i}", np.zeros((1, 1)), np.zeros((1, 1))) for i in range(n)]
    s = split_dataset(pairs, seed)
    ids = [p.id for part in (s.train, s.val, s.test) for p in part]
    assert len(ids) == len(set(ids)) == n
    assert min(len(s.train), len(s.val), len(s.test)) >= 1
    assert len(s.test) == max(1, int(0.2 * n)) and len(s.val) == max(1, int(0.1 * n))


def test_split_manifest_roundtrip(tmp_path, rng):
    pairs = _pairs(10, rng)
    s = split_dataset(pairs, 3)
    write_split_manifest(s, tmp_path / "split.tsv")
    line = (tmp_path / "split.tsv").read_text().splitlines()[0]
    assert line.count("\t") == 1
    assert read_split_manifest(tmp_path / "split.tsv", pairs).assignment() == s.assignment()


def test_flip_involution_and_count(rng):
    p = random_pair(rng)
    for flip in (hflip, vflip):
        q = flip(p)
        assert q.mask.sum() == p.mask.sum()
        r = flip(q)
        assert np.array_equal(r.image, p.image) and np.array_equal(r.mask, p.mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_flip_commutes_with_binarization(seed):
    soft = np.random.default_rng(seed).random((6, 7))
    assert np.array_equal(binarize(soft[:, ::-1]), binarize(soft)[:, ::-1])
    assert np.array_equal(binarize(soft[::-1]), binarize(soft)[::-1])


policies = st.builds(
    AugmentationPolicy,
    horizontal_flip_prob=st.floats(0, 1), vertical_flip_prob=st.floats(0, 1), clahe_enabled=st.booleans(),
    clahe_clip_limit=st.floats(0.5, 8), clahe_tile_grid=st.tuples(st.integers(1, 5), st.integers(1, 5)),
    random_crop_size=st.one_of(st.none(), st.tuples(st.integers(4, 16), st.integers(4, 16))),
)


@settings(max_examples=40, deadline=None)
@given(policy=policies, seed=st.integers(0, 10 ** 6))
def test_augment_preserves_invariants_and_is_deterministic(policy, seed):
    pair = random_pair(np.random.default_rng(seed), "x", (16, 16))
    a = augment(pair, policy, np.random.default_rng(seed))
    b = augment(pair, policy, np.random.default_rng(seed))
    assert a.shape == pair.shape
    assert a.image.min() >= -1 and a.image.max() <= 1
    assert set(np.unique(a.mask)) <= {0.0, 1.0}
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_geometric_transforms_shared(rng):
    pair = random_pair(rng, "x", (16, 16))
    pair = SamplePair("x", pair.mask * 2 - 1, pair.mask)  # image encodes the mask
    policy = AugmentationPolicy(0.5, 0.5, clahe_enabled=False, random_crop_size=(12, 10))
    for seed in range(10):
        out = augment(pair, policy, np.random.default_rng(seed))
        assert np.array_equal(out.image > 0, out.mask > 0.5)


def test_clahe_touches_image_only(rng):
    pair = random_pair(rng)
    out = augment(pair, AugmentationPolicy(0, 0, True), rng)
    assert np.array_equal(out.mask, pair.mask)
    assert not np.array_equal(out.image, pair.image)


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentationPolicy(horizontal_flip_prob=1.5)
    with pytest.raises(ConfigError):
        AugmentationPolicy(clahe_clip_limit=0)
    with pytest.raises(ConfigError):
        AugmentationPolicy(random_crop_size=(32, 32)).check_fits((16, 16))
