import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singan_seg.dataset_io import load_dataset
from singan_seg.sampler import (
    checkpoint_seed, export_samples, generate_samples, mask_diversity, reconstruct,
    write_generation_manifest,
)


def test_start_scale_past_finest_repeats_reconstruction(smoke_checkpoint):
    n_scales = smoke_checkpoint.schedule.num_scales
    samples = generate_samples(smoke_checkpoint, n_scales, 3, seed=0)
    rec_img, rec_mask = reconstruct(smoke_checkpoint)
    for img, mask in samples:
        assert np.array_equal(img, rec_img) and np.array_equal(mask, rec_mask)


def test_seeded_determinism_and_range(smoke_checkpoint):
    a = generate_samples(smoke_checkpoint, 0, 4, seed=11)
    b = generate_samples(smoke_checkpoint, 0, 4, seed=11)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(ma, mb)
        assert ia.shape == (32, 32, 3) and ma.shape == (32, 32, 1)
        assert 0 <= ia.min() and ia.max() <= 1
    # fresh noise per sample
    assert not np.array_equal(a[0][0], a[1][0])


def test_invalid_arguments(smoke_checkpoint):
    with pytest.raises(ValueError):
        generate_samples(smoke_checkpoint, -1, 2)
    with pytest.raises(ValueError):
        generate_samples(smoke_checkpoint, smoke_checkpoint.schedule.num_scales + 1, 2)
    with pytest.raises(ValueError):
        generate_samples(smoke_checkpoint, 0, 0)


def test_reconstruct_is_deterministic_and_finite(smoke_checkpoint):
    a, b = reconstruct(smoke_checkpoint), reconstruct(smoke_checkpoint)
    assert np.array_equal(a[0], b[0]) and np.isfinite(a[0]).all()


def test_mask_diversity_cases():
    m = (np.random.default_rng(0).random((6, 6, 1)) > 0.5).astype(float)
    mean, std = mask_diversity([m] * 10)
    assert np.array_equal(mean, m) and not std.any()
    mean, std = mask_diversity([np.zeros((4, 4)), np.ones((4, 4))])
    assert np.all(mean == 0.5) and np.all(std == 0.5)
    with pytest.raises(ValueError):
        mask_diversity([np.zeros((4, 4)), np.zeros((4, 5))])
    with pytest.raises(ValueError):
        mask_diversity([np.zeros((4, 4))])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_mask_diversity_matches_brute_force(seed, count):
    rng = np.random.default_rng(seed)
    masks = [(rng.random((5, 4)) < 0.3).astype(float) for _ in range(count)]
    mean, std = mask_diversity(masks)
    for y in range(5):
        for x in range(4):
            vals = [m[y, x] for m in masks]
            mu = sum(vals) / count
            assert mean[y, x] == pytest.approx(mu)
            assert std[y, x] == pytest.approx((sum((v - mu) ** 2 for v in vals) / count) ** 0.5)


def test_export_and_manifest(tmp_path, smoke_checkpoint):
    entry = export_samples(smoke_checkpoint, tmp_path, 4, 0, seed=2)
    assert len(entry["written"]) + len(entry["flagged_empty"]) == 4
    assert all(i.startswith("img000_s") for i in entry["written"])
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == sorted(entry["written"])
    path = write_generation_manifest(tmp_path, [entry], n=4, seed=2)
    body = json.loads(path.read_text())
    assert body["checkpoints"][0]["checkpoint_digest"] == smoke_checkpoint.digest()
    assert checkpoint_seed(2, "a") == checkpoint_seed(2, "a") != checkpoint_seed(2, "b")
