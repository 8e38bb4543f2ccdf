"""UNet++ style encoder-decoder with nested skip connections."""
from __future__ import annotations

from dataclasses import dataclass, asdict, fields

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SegModelConfig:
    preset: str = "small"
    base_width: int = 16
    depth: int = 5
    input_size: int = 128
    out_channels: int = 2
    # reference configuration this preset stands in for; informational only
    reference_encoder: str = ""

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "SegModelConfig":
        presets = {
            "tiny": dict(base_width=8, depth=4),
            "small": dict(base_width=16, depth=5),
            "reference": dict(base_width=32, depth=5, reference_encoder="se_resnext50_32x4d (UNet++, softmax2d)"),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        kwargs = dict(presets[name], preset=name)
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "SegModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config key: {unknown[0]}")
        return cls.from_preset(d.pop("preset", "small"), **d)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class NestedUNet(nn.Module):
    """Node ``x[i][j]`` sees ``x[i][0..j-1]`` and the upsampled ``x[i+1][j-1]``.

    Returns per-pixel logits for (background, polyp); apply a softmax over
    the channel axis to get probabilities.
    """

    def __init__(self, cfg: SegModelConfig | None = None):
        super().__init__()
        cfg = cfg or SegModelConfig()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.depth = cfg.depth
        self.nodes = nn.ModuleDict()
        for i in range(cfg.depth):
            cin = 3 if i == 0 else widths[i - 1]
            self.nodes[f"{i}_0"] = ConvBlock(cin, widths[i])
        for j in range(1, cfg.depth):
            for i in range(cfg.depth - j):
                self.nodes[f"{i}_{j}"] = ConvBlock(widths[i] * j + widths[i + 1], widths[i])
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        grid: dict[tuple[int, int], torch.Tensor] = {}
        h = x
        for i in range(self.depth):
            if i > 0:
                h = F.max_pool2d(grid[(i - 1, 0)], 2)
            grid[(i, 0)] = self.nodes[f"{i}_0"](h)
        for j in range(1, self.depth):
            for i in range(self.depth - j):
                below = grid[(i + 1, j - 1)]
                up = F.interpolate(below, size=grid[(i, 0)].shape[-2:], mode="bilinear", align_corners=False)
                skip = [grid[(i, k)] for k in range(j)]
                grid[(i, j)] = self.nodes[f"{i}_{j}"](torch.cat(skip + [up], dim=1))
        out = self.head(grid[(0, self.depth - 1)])
        return out if out.shape[-2:] == size else F.interpolate(out, size=size, mode="bilinear", align_corners=False)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
