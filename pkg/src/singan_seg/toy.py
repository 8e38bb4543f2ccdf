"""Procedural polyp-like image+mask pairs for desk-scale runs and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset_io import SegmentationSample, save_sample
from .pyramid import resample


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells, 1)).astype(np.float32)
    return resample(coarse, size, size)[..., 0]


def make_toy_sample(sample_id: str, size: int = 64, seed: int = 0) -> SegmentationSample:
    """A reddish mucosa-like background with one brighter elliptical blob as foreground."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size

    base = np.array([0.72, 0.38, 0.33], dtype=np.float32) + rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    shade = 0.12 * _smooth_noise(rng, size, 4) + 0.05 * _smooth_noise(rng, size, 12)
    vignette = 0.25 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    image = base[None, None, :] + (shade - vignette)[..., None]

    cy, cx = rng.uniform(0.3, 0.7, 2)
    ry, rx = rng.uniform(0.12, 0.25, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    r2 = u**2 + v**2
    mask = (r2 <= 1.0).astype(np.float32)

    polyp = np.array([0.88, 0.55, 0.45], dtype=np.float32)
    bump = np.clip(1.0 - r2, 0.0, 1.0)[..., None]
    texture = 0.06 * _smooth_noise(rng, size, 16)[..., None]
    image = image * (1 - mask[..., None]) + (polyp + 0.12 * bump + texture) * mask[..., None]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegmentationSample(sample_id, image, mask[..., None])


def make_toy_dataset(root: str | Path, count: int, size: int = 64, seed: int = 0, prefix: str = "img") -> list[SegmentationSample]:
    """Write ``count`` toy pairs to ``root`` in the standard dataset layout."""
    samples = [make_toy_sample(f"{prefix}{i:03d}", size, seed * 100003 + i) for i in range(count)]
    for s in samples:
        save_sample(s, root)
    return samples
