"""Gram-matrix style transfer from each real image onto its synthetic children."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import extractors
from .dataset_io import DatasetError, IMAGE_SUFFIXES, read_image, source_id, write_image
from .metrics import list_rgb_images

log = logging.getLogger(__name__)


@dataclass
class StyleConfig:
    content_weight: float = 1.0
    style_weight: float = 1000.0
    epochs: int = 1000
    content_layers: tuple[str, ...] = ("conv4_2",)
    style_layers: tuple[str, ...] = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
    step_size: float = 0.01
    seed: int = extractors.DEFAULT_SEED

    def __post_init__(self):
        self.content_layers = tuple(self.content_layers)
        self.style_layers = tuple(self.style_layers)
        if self.content_weight <= 0 or self.style_weight <= 0:
            raise ValueError("content and style weights must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "StyleConfig":
        d = dict(d)
        if "ratio" in d:
            d["content_weight"], d["style_weight"] = parse_ratio(d.pop("ratio"))
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown style config key: {unknown[0]}")
        return cls(**d)

    @property
    def ratio(self) -> str:
        return f"{self.content_weight:g}:{self.style_weight:g}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["content_layers"] = list(self.content_layers)
        d["style_layers"] = list(self.style_layers)
        return d


def parse_ratio(text: str) -> tuple[float, float]:
    """``"1:1000"`` or ``"1:1,000"`` -> ``(1.0, 1000.0)``."""
    try:
        c, s = str(text).replace(",", "").split(":")
        weights = float(c), float(s)
    except ValueError:
        raise ValueError(f"ratio must look like 'content:style', got {text!r}") from None
    if min(weights) <= 0:
        raise ValueError(f"ratio weights must be positive, got {text!r}")
    return weights


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C H W)`` for C x H x W (or 1 x C x H x W) features."""
    if features.dim() == 4:
        if features.shape[0] != 1:
            raise ValueError("gram_matrix expects a single feature map")
        features = features[0]
    c, h, w = features.shape
    flat = features.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


@dataclass
class TransferResult:
    image: np.ndarray
    losses: list[float] = field(default_factory=list)


def transfer_style(content: np.ndarray, style: np.ndarray, cfg: StyleConfig | None = None,
                   extractor=None, return_losses: bool = False):
    """Optimize an image, starting from ``content``, toward ``style``'s Gram statistics.

    Objective: ``content_weight * sum(D_C) + style_weight * sum(D_S)`` with
    ``D_C`` the mean squared feature difference to ``content`` and ``D_S`` the
    mean squared Gram difference to ``style``. Inputs and output are H x W x 3
    RGB arrays in [0, 1].
    """
    cfg = cfg or StyleConfig()
    extractor = extractor or extractors.vgg(cfg.seed)
    if float(np.ptp(style)) == 0.0:
        log.warning("style image is constant; returning content unchanged")
        return TransferResult(np.array(content, dtype=np.float32), []) if return_losses else np.array(content, dtype=np.float32)

    c_t = extractors.image_tensor(content)
    s_t = extractors.image_tensor(style)
    layers = list(dict.fromkeys(cfg.content_layers + cfg.style_layers))
    with torch.no_grad():
        c_feats = extractor(c_t, cfg.content_layers)
        s_grams = {k: gram_matrix(v) for k, v in extractor(s_t, cfg.style_layers).items()}

    x = c_t.clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.step_size)
    losses = []
    for _ in range(cfg.epochs):
        opt.zero_grad()
        feats = extractor(x, layers)
        d_c = sum(F.mse_loss(feats[k], c_feats[k]) for k in cfg.content_layers)
        d_s = sum(F.mse_loss(gram_matrix(feats[k]), s_grams[k]) for k in cfg.style_layers)
        loss = cfg.content_weight * d_c + cfg.style_weight * d_s
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
        losses.append(loss.item())
    out = x.detach()[0].permute(1, 2, 0).numpy().astype(np.float32)
    return TransferResult(out, losses) if return_losses else out


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def stylize_dataset(gen_dir, real_dir, out_dir, cfg: StyleConfig | None = None, extractor=None) -> Path:
    """Stylize every synthetic image with its own source real image; masks are copied byte for byte."""
    cfg = cfg or StyleConfig()
    gen_dir, real_dir, out_dir = Path(gen_dir), Path(real_dir), Path(out_dir)
    extractor = extractor or extractors.vgg(cfg.seed)
    fakes = _image_files(gen_dir / "images")
    real = {p.stem: p for p in list_rgb_images(real_dir)}
    missing = [p.name for p in fakes if source_id(p.stem) not in real]
    if missing:
        raise DatasetError(f"no source real image for: {', '.join(missing)}")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    if not fakes:
        log.warning("no synthetic images in %s", gen_dir)

    style_cache: dict[str, np.ndarray] = {}
    for p in fakes:
        src = source_id(p.stem)
        if src not in style_cache:
            style_cache[src] = read_image(real[src])
        out = transfer_style(read_image(p), style_cache[src], cfg, extractor)
        write_image(out_dir / "images" / f"{p.stem}.png", out)
        mask = next((m for m in _image_files(gen_dir / "masks") if m.stem == p.stem), None)
        if mask is not None:
            shutil.copyfile(mask, out_dir / "masks" / mask.name)
        log.info("stylized=%s source=%s ratio=%s", p.stem, src, cfg.ratio)

    manifest = {
        "ratio": cfg.ratio,
        "epochs": cfg.epochs,
        "config": cfg.to_dict(),
        "extractor_weights_hash": extractor.weights_hash,
        "extractor_source": extractor.source,
        "seed": cfg.seed,
        "count": len(fakes),
        "generated_from": gen_dir.name,
    }
    (out_dir / "style_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir
