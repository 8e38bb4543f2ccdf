"""Synthetic image+mask generation from trained checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .dataset_io import (
    SegmentationSample, binarize_mask, save_sample, split_four_channel, synthetic_id,
)
from .networks import to_array
from .trainer import Checkpoint

log = logging.getLogger(__name__)


def generate_samples(ckpt: Checkpoint, start_scale: int = 0, n: int = 10, seed: int = 0):
    """``n`` random (image, raw_mask) pairs in storage range.

    Scales below ``start_scale`` replay the reconstruction path; from
    ``start_scale`` on, fresh noise scaled by each level's sigma is injected.
    ``start_scale == num_scales`` therefore returns ``n`` reconstructions.
    """
    stack = ckpt.stack
    if not 0 <= start_scale <= stack.num_scales:
        raise ValueError(f"start_scale must lie in [0, {stack.num_scales}], got {start_scale}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for _ in range(n):
            fc = to_array(stack.run(stack.num_scales - 1, start_scale, rng))
            out.append(split_four_channel(fc))
    return out


def reconstruct(ckpt: Checkpoint):
    return split_four_channel(to_array(ckpt.stack.reconstruction()))


def mask_diversity(masks) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-wise mean and population standard deviation over a stack of masks."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    if any(m.shape != masks[0].shape for m in masks):
        raise ValueError("all masks must share the same dims")
    stack = np.stack(masks)
    return stack.mean(axis=0), stack.std(axis=0)


def checkpoint_seed(seed: int, source: str) -> int:
    """Per-checkpoint seed independent of the order checkpoints are visited in."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{source}".encode()).digest()[:4], "little")


def export_samples(
    ckpt: Checkpoint,
    out_dir: str | Path,
    n: int = 10,
    start_scale: int = 0,
    seed: int = 0,
    threshold: float = 0.5,
) -> dict:
    """Write ``<realid>_s<nn>.png`` pairs under ``out_dir``; empty masks are flagged and skipped."""
    samples = generate_samples(ckpt, start_scale, n, checkpoint_seed(seed, ckpt.source_id))
    written, flagged = [], []
    for i, (image, raw_mask) in enumerate(samples):
        sid = synthetic_id(ckpt.source_id, i)
        mask = binarize_mask(raw_mask, threshold)
        if not mask.any():
            flagged.append(sid)
            log.warning("sample=%s flagged=empty_mask", sid)
            continue
        save_sample(SegmentationSample(sid, image, mask), out_dir)
        written.append(sid)
    return {
        "checkpoint_id": ckpt.source_id,
        "checkpoint_digest": ckpt.digest(),
        "start_scale": start_scale,
        "seed": seed,
        "n": n,
        "threshold": threshold,
        "written": written,
        "flagged_empty": flagged,
    }


def write_generation_manifest(out_dir: str | Path, entries: list[dict], **extra) -> Path:
    path = Path(out_dir) / "generation_manifest.json"
    body = dict(extra, checkpoints=entries, flagged_empty=sum(len(e["flagged_empty"]) for e in entries))
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path
