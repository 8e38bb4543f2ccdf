"""FID and single-image FID (SIFID) between image folders, plus table reports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import extractors
from .dataset_io import IMAGE_SUFFIXES, DatasetError, read_image, source_id

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
PREPROCESSING = "rgb[0,1] -> bicubic(antialias) 299x299 -> [-1,1]; sifid: native size, first inception block"


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError(f"need an N x d feature matrix with N >= 2, got {feats.shape}")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False), feats.shape[0])


def _psd(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return np.maximum(vals, EIG_FLOOR), vecs


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    Covariances are symmetrized and their eigenvalues floored at 1e-10. The
    trace of the matrix square root is taken from the eigenvalues of
    ``S_a^(1/2) S_b S_a^(1/2)``, which is symmetric and similar to ``S_a S_b``,
    so it is real by construction.
    """
    mu_a, mu_b = np.asarray(a.mu, np.float64), np.asarray(b.mu, np.float64)
    sa, sb = np.atleast_2d(np.asarray(a.sigma, np.float64)), np.atleast_2d(np.asarray(b.sigma, np.float64))
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape:
        raise ValueError(f"dimension mismatch: {mu_a.shape} vs {mu_b.shape}")
    for arr in (mu_a, mu_b, sa, sb):
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature statistics contain non-finite values")
    va, ea = _psd(sa)
    vb, eb = _psd(sb)
    sa = (ea * va) @ ea.T
    sb = (eb * vb) @ eb.T
    root_a = (ea * np.sqrt(va)) @ ea.T
    inner = root_a @ sb @ root_a
    tr_covmean = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_covmean)


def list_rgb_images(directory: str | Path) -> list[Path]:
    """Image files of a dataset folder; masks are never included."""
    d = Path(directory)
    if (d / "images").is_dir():
        d = d / "images"
    if not d.is_dir():
        raise DatasetError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@torch.no_grad()
def pooled_features(paths, extractor=None, batch_size: int = 8) -> np.ndarray:
    extractor = extractor or extractors.inception()
    feats = []
    for i in range(0, len(paths), batch_size):
        batch = [extractors.image_tensor(read_image(p)) for p in paths[i:i + batch_size]]
        sizes = {tuple(t.shape) for t in batch}
        if len(sizes) == 1:
            feats.append(extractor.pooled(torch.cat(batch)).numpy())
        else:
            feats.extend(extractor.pooled(t).numpy() for t in batch)
    return np.concatenate(feats).astype(np.float64)


def fid(real_dir, fake_dir, extractor=None) -> float:
    real, fake = list_rgb_images(real_dir), list_rgb_images(fake_dir)
    for name, paths in (("real", real), ("fake", fake)):
        if len(paths) < 2:
            raise DatasetError(f"{name} set needs at least 2 images, found {len(paths)}")
        if len(paths) < 2048:
            log.warning("set=%s images=%d below feature dim 2048; covariance is rank deficient", name, len(paths))
    extractor = extractor or extractors.inception()
    a = FeatureStats.from_features(pooled_features(real, extractor))
    b = FeatureStats.from_features(pooled_features(fake, extractor))
    return frechet_distance(a, b)


@torch.no_grad()
def spatial_stats(image: np.ndarray, extractor=None) -> FeatureStats:
    extractor = extractor or extractors.inception()
    fmap = extractor.spatial(extractors.image_tensor(image))[0]
    return FeatureStats.from_features(fmap.flatten(1).T.numpy())


def sifid_pair(real_image: np.ndarray, fake_image: np.ndarray, extractor=None) -> float:
    return frechet_distance(spatial_stats(real_image, extractor), spatial_stats(fake_image, extractor))


def sifid(real_dir, fake_dir, extractor=None) -> tuple[float, list[tuple[str, float]]]:
    """Mean SIFID over fake images, each paired with its source real image by ID prefix."""
    extractor = extractor or extractors.inception()
    real = {p.stem: p for p in list_rgb_images(real_dir)}
    fakes = list_rgb_images(fake_dir)
    if not fakes:
        raise DatasetError(f"no images in {fake_dir}")
    unpaired = [p.stem for p in fakes if source_id(p.stem) not in real and p.stem not in real]
    if unpaired:
        raise DatasetError(f"unpaired fake image(s): {', '.join(unpaired)}")
    cache: dict[str, FeatureStats] = {}
    per_pair = []
    for p in fakes:
        src = p.stem if p.stem in real else source_id(p.stem)
        if src not in cache:
            cache[src] = spatial_stats(read_image(real[src]), extractor)
        value = frechet_distance(cache[src], spatial_stats(read_image(p), extractor))
        per_pair.append((p.stem, value))
    return float(np.mean([v for _, v in per_pair])), per_pair


# -- reports ------------------------------------------------------------------

@dataclass
class MetricResult:
    dataset_a: str
    dataset_b: str
    metric: str
    set_id: int
    value: float


def summarize(values, ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation (population by default)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot summarize an empty set of values")
    sd = float(values.std(ddof=ddof)) if values.size > ddof else 0.0
    return float(values.mean()), sd


def report(results: list[MetricResult], out_prefix: str | Path, ddof: int = 0, notes: str | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (one row per value) and ``<prefix>.md`` (Set 1..k, Mean, SD per row)."""
    if not results:
        raise ValueError("no metric results to report")
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_prefix.with_suffix(".csv"), out_prefix.with_suffix(".md")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_a", "dataset_b", "metric", "set_id", "value"])
        for r in results:
            w.writerow([r.dataset_a, r.dataset_b, r.metric, r.set_id, f"{r.value:.6f}"])

    groups: dict[tuple[str, str, str], list[MetricResult]] = {}
    for r in results:
        groups.setdefault((r.metric, r.dataset_a, r.dataset_b), []).append(r)
    n_sets = max(len(g) for g in groups.values())
    header = ["Metric", "Reference", "Target"] + [f"Set {i + 1}" for i in range(n_sets)] + ["Mean", "SD"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for (metric, a, b), rows in groups.items():
        rows = sorted(rows, key=lambda r: r.set_id)
        mean, sd = summarize([r.value for r in rows], ddof)
        cells = [f"{r.value:.4f}" for r in rows] + [""] * (n_sets - len(rows))
        lines.append("| " + " | ".join([metric.upper(), a, b] + cells + [f"{mean:.4f}", f"{sd:.4f}"]) + " |")
    lines.append("")
    lines.append(f"SD: {'population' if ddof == 0 else f'ddof={ddof}'}. Preprocessing: {PREPROCESSING}.")
    if notes:
        lines.append(notes)
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path
