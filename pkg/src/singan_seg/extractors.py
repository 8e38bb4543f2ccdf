"""Frozen feature extractors shared by style transfer and the FID/SIFID metrics.

Both networks are built from torchvision topologies (VGG-19, Inception-v3).
Weights come from a pinned local file when one is present in the weights
directory (``$SINGAN_SEG_WEIGHTS``, default ``~/.cache/singan_seg``):

    vgg19.pth           torchvision VGG-19 state dict
    inception_v3.pth    torchvision Inception-v3 state dict

Otherwise the parameters are drawn deterministically from a fixed seed.
Either way :attr:`weights_hash` identifies the exact weights used and is
written into every manifest and report. Nothing is downloaded at run time.
"""
from __future__ import annotations

import hashlib
import logging
import os
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FID_SIZE = 299
DEFAULT_SEED = 20211


def weights_dir() -> Path:
    return Path(os.environ.get("SINGAN_SEG_WEIGHTS", Path.home() / ".cache" / "singan_seg"))


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, t in module.state_dict().items():
        h.update(key.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _seeded_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()


def _load_or_seed(module: nn.Module, filename: str, seed: int) -> str:
    path = weights_dir() / filename
    if path.exists():
        module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True), strict=False)
        source = f"file:{path.name}"
    else:
        _seeded_init(module, seed)
        source = f"seeded:{seed}"
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    log.debug("extractor=%s source=%s", filename, source)
    return source


_VGG_BLOCKS = [2, 2, 4, 4, 4]


def _vgg_layer_names() -> list[str]:
    names = []
    for b, convs in enumerate(_VGG_BLOCKS, start=1):
        for c in range(1, convs + 1):
            names += [f"conv{b}_{c}", f"relu{b}_{c}"]
        names.append(f"pool{b}")
    return names


class VGGFeatures(nn.Module):
    """VGG-19 convolutional trunk exposing named activations (``conv4_2``, ``relu1_1``...)."""

    layer_names = _vgg_layer_names()

    def __init__(self, seed: int = DEFAULT_SEED):
        super().__init__()
        self.features = models.vgg19(weights=None).features
        self.source = _load_or_seed(self, "vgg19.pth", seed)
        self.weights_hash = state_hash(self)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        """``x``: N x 3 x H x W in [0, 1]. Returns the requested activations."""
        wanted = set(layers)
        unknown = wanted - set(self.layer_names)
        if unknown:
            raise KeyError(f"unknown VGG layer(s): {sorted(unknown)}")
        out = {}
        h = (x - self.mean) / self.std
        for name, layer in zip(self.layer_names, self.features):
            h = layer(h)
            if name in wanted:
                out[name] = h
                if len(out) == len(wanted):
                    break
        return out


class InceptionFeatures(nn.Module):
    """Inception-v3 trunk: 2048-d pool features for FID, first-block spatial map for SIFID."""

    def __init__(self, seed: int = DEFAULT_SEED):
        super().__init__()
        net = models.inception_v3(weights=None, aux_logits=False, init_weights=False)
        self.block0 = nn.Sequential(net.Conv2d_1a_3x3, net.Conv2d_2a_3x3, net.Conv2d_2b_3x3, net.maxpool1)
        self.block1 = nn.Sequential(net.Conv2d_3b_1x1, net.Conv2d_4a_3x3, net.maxpool2)
        self.block2 = nn.Sequential(net.Mixed_5b, net.Mixed_5c, net.Mixed_5d, net.Mixed_6a,
                                    net.Mixed_6b, net.Mixed_6c, net.Mixed_6d, net.Mixed_6e)
        self.block3 = nn.Sequential(net.Mixed_7a, net.Mixed_7b, net.Mixed_7c)
        self.source = _load_or_seed(self, "inception_v3.pth", seed)
        self.weights_hash = state_hash(self)

    @staticmethod
    def _normalize(x: torch.Tensor) -> torch.Tensor:
        return 2.0 * x - 1.0

    def spatial(self, x: torch.Tensor) -> torch.Tensor:
        """N x 64 x h x w first-block features of images at native resolution."""
        return self.block0(self._normalize(x))

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """N x 2048 globally pooled features after bicubic resize to 299 x 299."""
        x = F.interpolate(x, size=(FID_SIZE, FID_SIZE), mode="bicubic", align_corners=False, antialias=True)
        h = self.block0(self._normalize(x.clamp(0.0, 1.0)))
        h = self.block3(self.block2(self.block1(h)))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


@lru_cache(maxsize=4)
def vgg(seed: int = DEFAULT_SEED) -> VGGFeatures:
    return VGGFeatures(seed)


@lru_cache(maxsize=4)
def inception(seed: int = DEFAULT_SEED) -> InceptionFeatures:
    return InceptionFeatures(seed)


def image_tensor(image) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x H x W float32 tensor."""
    return torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1).unsqueeze(0).contiguous()
