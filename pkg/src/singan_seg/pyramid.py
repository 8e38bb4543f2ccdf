"""Multi-scale schedule and image pyramid for four-channel images.

Levels are indexed coarsest-first (index 0 is the coarsest). Logs also show
the generator name, where ``G_N`` is the coarsest and ``G_0`` the finest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np
import torch


class PyramidError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleSchedule:
    dims: tuple[tuple[int, int], ...]  # coarsest -> finest
    scale_factor: float = 0.75
    min_dim: int = 25
    max_dim: int = 250

    @property
    def num_scales(self) -> int:
        return len(self.dims)

    @property
    def finest(self) -> tuple[int, int]:
        return self.dims[-1]

    def generator_name(self, n: int) -> str:
        return f"G_{self.num_scales - 1 - n}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = [list(x) for x in self.dims]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleSchedule":
        return cls(
            dims=tuple((int(h), int(w)) for h, w in d["dims"]),
            scale_factor=float(d["scale_factor"]),
            min_dim=int(d["min_dim"]),
            max_dim=int(d["max_dim"]),
        )


def capped_size(h: int, w: int, max_dim: int) -> tuple[int, int]:
    if max(h, w) <= max_dim:
        return h, w
    f = max_dim / max(h, w)
    return max(1, round(h * f)), max(1, round(w * f))


def compute_scale_schedule(
    h: int, w: int, r: float = 0.75, min_dim: int = 25, max_dim: int = 250
) -> ScaleSchedule:
    """Pyramid dims for an ``h`` x ``w`` image, coarsest first.

    The image is first capped so that ``max(h, w) <= max_dim``; then
    ``floor(log(min_dim / min(h, w)) / log(r))`` coarser levels are added, the
    level ``d`` steps below the finest having dims ``round(finest * r**d)``.
    """
    if not 0.0 < r < 1.0:
        raise PyramidError(f"scale factor must lie in (0, 1), got {r}")
    if not min_dim < max_dim:
        raise PyramidError(f"min_dim ({min_dim}) must be below max_dim ({max_dim})")
    h, w = capped_size(h, w, max_dim)
    if min(h, w) < min_dim:
        raise PyramidError(f"image too small for pyramid: {h}x{w} < {min_dim}")
    steps = int(math.floor(math.log(min_dim / min(h, w)) / math.log(r) + 1e-9))
    dims = []
    for d in range(steps, -1, -1):
        f = r**d
        dims.append((max(2, round(h * f)), max(2, round(w * f))))
    return ScaleSchedule(tuple(dims), float(r), int(min_dim), int(max_dim))


def _mirror(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return period - i if i >= n else i


@lru_cache(maxsize=256)
def _weights_1d(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix of triangle-filter weights.

    The filter widens by the scale ratio when downscaling (anti-aliasing);
    taps falling outside the signal are mirrored back in.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    out = np.zeros((n_out, n_in), dtype=np.float64)
    for j in range(n_out):
        center = (j + 0.5) * scale - 0.5
        lo, hi = math.floor(center - support), math.ceil(center + support)
        for i in range(lo, hi + 1):
            wgt = 1.0 - abs(i - center) / support
            if wgt > 0:
                out[j, _mirror(i, n_in)] += wgt
    out /= out.sum(axis=1, keepdims=True)
    return out


def resample(fc: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear (anti-aliased on downscale) resize of an H x W x C array."""
    if h < 2 or w < 2:
        raise PyramidError(f"target size must be at least 2x2, got {h}x{w}")
    fc = np.asarray(fc)
    wh = _weights_1d(fc.shape[0], h)
    ww = _weights_1d(fc.shape[1], w)
    out = np.einsum("ij,jkc,lk->ilc", wh, fc.astype(np.float64), ww)
    return out.astype(fc.dtype if fc.dtype.kind == "f" else np.float32)


def resample_tensor(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Same filter as :func:`resample` for an N x C x H x W tensor (differentiable)."""
    if h < 2 or w < 2:
        raise PyramidError(f"target size must be at least 2x2, got {h}x{w}")
    if x.shape[-2:] == (h, w):
        return x
    wh = torch.from_numpy(_weights_1d(x.shape[-2], h)).to(x.dtype)
    ww = torch.from_numpy(_weights_1d(x.shape[-1], w)).to(x.dtype)
    return torch.einsum("ij,ncjk,lk->ncil", wh, x, ww)


def build_pyramid(fc: np.ndarray, schedule: ScaleSchedule) -> list[np.ndarray]:
    """Resample the finest four-channel image to every level of ``schedule``."""
    if tuple(fc.shape[:2]) != tuple(schedule.finest):
        raise PyramidError(f"image dims {fc.shape[:2]} do not match finest level {schedule.finest}")
    levels = [resample(fc, h, w) for h, w in schedule.dims[:-1]]
    levels.append(np.array(fc, dtype=np.float32, copy=True))
    return levels
