import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from singan_seg.dataset_io import (
    DatasetError, FoldSplit, binarize_mask, histogram_from_percentages, load_dataset, make_folds,
    mask_histogram, save_sample, source_id, split_four_channel, stack_four_channel, synthetic_id,
    tree_digest, true_pixel_percentage, SegmentationSample,
)
from singan_seg.toy import make_toy_dataset, make_toy_sample


def _write_pair(root, stem, size=32, mask_values=(0, 255)):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), 120, np.uint8)).save(root / "images" / f"{stem}.png")
    m = np.zeros((size, size), np.uint8)
    m[: size // 2] = mask_values[-1]
    Image.fromarray(m).save(root / "masks" / f"{stem}.png")


def test_load_two_pairs_sorted(tmp_path):
    _write_pair(tmp_path, "b")
    _write_pair(tmp_path, "a")
    samples = load_dataset(tmp_path)
    assert [s.id for s in samples] == ["a", "b"]
    assert samples[0].image.shape == (32, 32, 3)
    assert samples[0].mask.shape == (32, 32, 1)


def test_gray_mask_thresholded(tmp_path):
    _write_pair(tmp_path, "a")
    m = np.zeros((32, 32), np.uint8)
    m[:10], m[10:20] = 127, 255
    Image.fromarray(m).save(tmp_path / "masks" / "a.png")
    mask = load_dataset(tmp_path)[0].mask
    assert set(np.unique(mask)) == {0.0, 1.0}
    assert mask[:10].max() == 0 and mask[10:20].min() == 1


def test_missing_mask_error(tmp_path):
    _write_pair(tmp_path, "a")
    (tmp_path / "masks" / "a.png").unlink()
    with pytest.raises(DatasetError, match="missing mask: a"):
        load_dataset(tmp_path)


def test_size_mismatch_and_unreadable(tmp_path):
    _write_pair(tmp_path, "a")
    Image.fromarray(np.zeros((30, 32), np.uint8)).save(tmp_path / "masks" / "a.png")
    with pytest.raises(DatasetError, match="size mismatch"):
        load_dataset(tmp_path)
    (tmp_path / "masks" / "a.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="unreadable"):
        load_dataset(tmp_path)


def test_manifest_subset(tmp_path):
    _write_pair(tmp_path, "a")
    _write_pair(tmp_path, "b")
    man = tmp_path / "m.json"
    man.write_text(json.dumps([{"id": "b", "image_path": "images/b.png", "mask_path": "masks/b.png"}]))
    assert [s.id for s in load_dataset(tmp_path, man)] == ["b"]


def test_stack_range_map():
    z = stack_four_channel(np.zeros((8, 8, 3)), np.zeros((8, 8, 1)))
    o = stack_four_channel(np.ones((8, 8, 3)), np.ones((8, 8)))
    assert z.shape == (8, 8, 4)
    assert np.all(z == -1) and np.all(o == 1)
    with pytest.raises(ValueError):
        stack_four_channel(np.zeros((8, 8, 3)), np.zeros((7, 8, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stack_split_round_trip(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((9, 7, 3), dtype=np.float32)
    mask = rng.random((9, 7, 1), dtype=np.float32)
    back_img, back_mask = split_four_channel(stack_four_channel(img, mask))
    assert np.abs(back_img - img).max() < 1e-6
    assert np.abs(back_mask - mask).max() < 1e-6


def test_split_affine_and_clip():
    fc = np.zeros((2, 2, 4), np.float32)
    fc[..., 3] = 0.2
    fc[0, 0, 0] = 1.5
    img, mask = split_four_channel(fc)
    assert mask[0, 0, 0] == pytest.approx(0.6)
    assert img[0, 0, 0] == 1.0


def test_binarize_boundary():
    assert binarize_mask(np.array([0.49, 0.5, 0.51])).tolist() == [0, 1, 1]
    raw = np.full((4, 4, 1), 0.3)
    assert binarize_mask(raw, 0.5).sum() == 0
    assert binarize_mask(raw, 0.25).sum() == 16
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            binarize_mask(raw, bad)


def test_true_pixel_percentage():
    m = np.zeros((2, 2))
    m[0, 0] = 1
    assert true_pixel_percentage(m) == 25.0
    assert true_pixel_percentage(np.ones((5, 3, 1))) == 100.0
    rng = np.random.default_rng(3)
    m = np.zeros(100)
    m[rng.choice(100, 37, replace=False)] = 1
    m = m.reshape(10, 10)
    brute = sum(1 for r in range(10) for c in range(10) if m[r, c]) / 100 * 100
    assert true_pixel_percentage(m) == brute == 37.0


def test_histogram():
    bins = dict(histogram_from_percentages([3, 4, 7], 5))
    assert bins[0] == 2 and bins[5] == 1 and sum(bins.values()) == 3
    assert histogram_from_percentages([100.0], 5)[-1] == (95, 1)
    assert all(c == 0 for _, c in histogram_from_percentages([], 5))
    assert mask_histogram([np.ones((4, 4))], 10)[-1] == (90, 1)
    for bad in (0, -5, 101):
        with pytest.raises(ValueError):
            histogram_from_percentages([1], bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), max_size=40), st.sampled_from([1, 2, 5, 10, 20, 25, 50, 100]))
def test_histogram_conserves_count(values, bin_size):
    bins = histogram_from_percentages(values, bin_size)
    assert sum(c for _, c in bins) == len(values)
    assert len(bins) == 100 // bin_size


def test_ids():
    assert synthetic_id("img7", 3) == "img7_s03"
    assert source_id("img7_s03") == "img7"
    assert source_id("img7") == "img7"
    assert source_id("a_b_s10") == "a_b"


def test_folds_balance_and_determinism():
    ids = [f"r{i}" for i in range(9)]
    f1, f2 = make_folds(ids, 3, 7), make_folds(ids, 3, 7)
    assert f1.assignments == f2.assignments
    assert sorted(len(f1.members(k)) for k in range(3)) == [3, 3, 3]
    assert f1.fold_of("r4_s03") == f1.fold_of("r4")
    assert FoldSplit.from_json(f1.to_json()) == f1
    with pytest.raises(ValueError):
        make_folds(ids[:2], 3, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.integers(6, 20))
def test_folds_provenance_property(k, seed, n):
    real = [f"img{i}" for i in range(n)]
    synth = [synthetic_id(r, j) for r in real for j in range(3)]
    folds = make_folds(real + synth, k, seed)
    for s in synth:
        assert folds.fold_of(s) == folds.fold_of(source_id(s))
    sizes = [len([r for r in real if folds.fold_of(r) == f]) for f in range(k)]
    assert max(sizes) - min(sizes) <= 1


def test_save_round_trip_and_tree_digest(tmp_path):
    s = make_toy_sample("x", 32, seed=1)
    save_sample(s, tmp_path / "d")
    back = load_dataset(tmp_path / "d")[0]
    assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(back.mask, s.mask)
    make_toy_dataset(tmp_path / "e", 1, 32, seed=0, prefix="x")
    make_toy_dataset(tmp_path / "f", 1, 32, seed=0, prefix="x")
    assert tree_digest(tmp_path / "e") == tree_digest(tmp_path / "f")


def test_sample_validation():
    with pytest.raises(ValueError):
        SegmentationSample("a", np.zeros((4, 4)), np.zeros((4, 4, 1)))
