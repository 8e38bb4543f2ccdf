import shutil

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from singan_seg import metrics as M
from singan_seg.dataset_io import DatasetError, save_sample
from singan_seg.toy import make_toy_sample


def _scipy_frechet(mu1, s1, mu2, s2):
    """Reference route: general matrix square root of the product."""
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    covmean = covmean.real
    d = mu1 - mu2
    return d @ d + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean)


def _stats(mu, sigma):
    return M.FeatureStats(np.asarray(mu, float), np.asarray(sigma, float), 10)


def test_identity_and_closed_forms():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 6))
    s = M.FeatureStats.from_features(x)
    assert abs(M.frechet_distance(s, s)) < 1e-6
    eye = np.eye(5)
    assert M.frechet_distance(_stats(np.zeros(5), eye), _stats([3, 4, 0, 0, 0], eye)) == pytest.approx(25.0, abs=1e-6)
    assert M.frechet_distance(_stats(np.zeros(2), 4 * np.eye(2)), _stats(np.zeros(2), np.eye(2))) == pytest.approx(2.0, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_matches_sqrtm_reference(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3 * d + 5, d)), rng.standard_normal((3 * d + 5, d)) * 1.7 + 0.3
    sa, sb = M.FeatureStats.from_features(a), M.FeatureStats.from_features(b)
    ref = _scipy_frechet(sa.mu, np.atleast_2d(sa.sigma), sb.mu, np.atleast_2d(sb.sigma))
    assert M.frechet_distance(sa, sb) == pytest.approx(ref, rel=1e-6, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = M.FeatureStats.from_features(rng.standard_normal((20, 4)))
    b = M.FeatureStats.from_features(rng.standard_normal((20, 4)) + 1)
    assert M.frechet_distance(a, b) == pytest.approx(M.frechet_distance(b, a), rel=1e-9)
    assert M.frechet_distance(a, b) > -1e-9


def test_rank_deficient_and_errors():
    rng = np.random.default_rng(1)
    low = rng.standard_normal((3, 10))  # 3 samples in 10 dims
    s = M.FeatureStats.from_features(low)
    assert abs(M.frechet_distance(s, s)) < 1e-6
    bad = _stats([np.nan, 0], np.eye(2))
    with pytest.raises(ValueError):
        M.frechet_distance(bad, _stats([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        M.frechet_distance(_stats([0, 0], np.eye(2)), _stats([0, 0, 0], np.eye(3)))
    with pytest.raises(ValueError):
        M.FeatureStats.from_features(np.zeros((1, 3)))


@pytest.fixture(scope="module")
def desk_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("sets")
    for i in range(6):
        save_sample(make_toy_sample(f"r{i}", 40, seed=i), root / ("half_a" if i < 3 else "half_b"))
        save_sample(make_toy_sample(f"r{i}", 40, seed=i), root / "all")
    return root


def test_fid_self_and_halves(desk_sets):
    self_d = M.fid(desk_sets / "all", desk_sets / "all")
    assert abs(self_d) < 1e-3
    halves = M.fid(desk_sets / "half_a", desk_sets / "half_b")
    assert halves > 0 and halves > abs(self_d)
    assert M.fid(desk_sets / "half_b", desk_sets / "half_a") == pytest.approx(halves, abs=1e-6)


def test_sifid_self_pairing_and_errors(desk_sets, tmp_path):
    mean, per_pair = M.sifid(desk_sets / "all", desk_sets / "all")
    assert abs(mean) < 1e-6 and len(per_pair) == 6
    img = make_toy_sample("x", 40, seed=3).image
    assert abs(M.sifid_pair(img, img)) < 1e-6
    other = make_toy_sample("y", 40, seed=4).image
    assert M.sifid_pair(img, other) > 1e-6
    save_sample(make_toy_sample("nobody_s00", 40), tmp_path / "fake")
    with pytest.raises(DatasetError, match="unpaired"):
        M.sifid(desk_sets / "all", tmp_path / "fake")


def test_masks_excluded(desk_sets):
    paths = M.list_rgb_images(desk_sets / "all")
    assert all(p.parent.name == "images" for p in paths)


def test_summarize_and_report(tmp_path):
    mean, sd = M.summarize([1, 2, 3, 4, 5])
    assert mean == 3 and sd == pytest.approx(np.sqrt(2))
    assert M.summarize([7.0]) == (7.0, 0.0)
    with pytest.raises(ValueError):
        M.summarize([])
    results = [M.MetricResult("real", "fake", "fid", i + 1, float(v)) for i, v in enumerate([1, 2, 3, 4, 5])]
    csv_path, md_path = M.report(results, tmp_path / "r")
    assert len(csv_path.read_text().strip().splitlines()) == 6
    md = md_path.read_text()
    for col in ("Set 1", "Set 5", "Mean", "SD"):
        assert col in md
    assert "| 3.0000 | 1.4142 |" in md
