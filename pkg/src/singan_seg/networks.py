"""Per-scale generator/critic pairs for four-channel (RGB + mask) images."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .pyramid import ScaleSchedule, resample_tensor

log = logging.getLogger(__name__)

CHANNELS = 4
NORMS = ("batch", "instance", "none")


def _norm(kind: str, width: int) -> nn.Module:
    if kind == "batch":
        # batch statistics at train and sample time alike; batches are single images
        return nn.BatchNorm2d(width, track_running_stats=False)
    if kind == "instance":
        return nn.InstanceNorm2d(width, affine=True)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown normalization {kind!r}; expected one of {NORMS}")


def _block(cin: int, cout: int, padding: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=1, padding=padding),
        _norm(norm, cout),
        nn.LeakyReLU(0.2),
    )


def layer_widths(num_scales: int, base: int = 32, cap: int = 128) -> list[int]:
    """Channel width per scale, coarse to fine: doubled every 4 scales up to ``cap``."""
    return [min(base * 2 ** (n // 4), cap) for n in range(num_scales)]


class _Bounded(torch.autograd.Function):
    """Clamp to [-1, 1] on the forward pass, identity gradient on the backward pass."""

    @staticmethod
    def forward(ctx, x):
        return x.clamp(-1.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


class GeneratorScale(nn.Module):
    """Residual generator: ``out = bound(prev + tanh(body(noise + prev)))``.

    Convolutions are zero-padded so the output has the input's spatial size.
    """

    def __init__(self, width: int = 32, num_blocks: int = 5, norm: str = "batch"):
        super().__init__()
        layers = [_block(CHANNELS, width, 1, norm)]
        layers += [_block(width, width, 1, norm) for _ in range(num_blocks - 2)]
        layers += [nn.Conv2d(width, CHANNELS, 3, stride=1, padding=1), nn.Tanh()]
        self.body = nn.Sequential(*layers)
        self.width = width

    def forward(self, noise: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
        if noise.shape != prev.shape:
            raise ValueError(f"noise {tuple(noise.shape)} and prev {tuple(prev.shape)} differ")
        return _Bounded.apply(prev + self.body(noise + prev))


class DiscriminatorScale(nn.Module):
    """Markovian patch critic; unpadded convs give an h' x w' score map."""

    def __init__(self, width: int = 32, num_blocks: int = 5, norm: str = "batch"):
        super().__init__()
        layers = [_block(CHANNELS, width, 0, norm)]
        layers += [_block(width, width, 0, norm) for _ in range(num_blocks - 2)]
        layers.append(nn.Conv2d(width, 1, 3, stride=1, padding=0))
        self.body = nn.Sequential(*layers)
        self.receptive_field = 2 * num_blocks + 1
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.receptive_field:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} smaller than receptive field {self.receptive_field}"
            )
        return self.body(x)


def init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02)
                m.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelStack:
    """One generator and one critic per pyramid level plus the noise model."""

    schedule: ScaleSchedule
    generators: nn.ModuleList
    discriminators: nn.ModuleList
    sigmas: list[float]
    z_star: torch.Tensor  # 1 x 4 x h0 x w0, fixed reconstruction noise at the coarsest level
    seed: int = 0
    norm: str = "batch"
    num_blocks: int = 5
    widths: list[int] = field(default_factory=list)

    @property
    def num_scales(self) -> int:
        return self.schedule.num_scales

    def dims(self, n: int) -> tuple[int, int]:
        return self.schedule.dims[n]

    def _noise(self, n: int, rng: torch.Generator | None) -> torch.Tensor:
        """Noise fed to scale ``n``: ``z*`` / zeros on the reconstruction path, else ``sigma_n * z``."""
        h, w = self.dims(n)
        if rng is None:
            return self.z_star.clone() * self.sigmas[0] if n == 0 else torch.zeros(1, CHANNELS, h, w)
        return torch.randn(1, CHANNELS, h, w, generator=rng) * self.sigmas[n]

    def upsample_to(self, x: torch.Tensor | None, n: int) -> torch.Tensor:
        h, w = self.dims(n)
        if x is None:
            return torch.zeros(1, CHANNELS, h, w)
        return resample_tensor(x, h, w)

    def run(self, upto: int, start_scale: int, rng: torch.Generator | None) -> torch.Tensor:
        """Output of scale ``upto``; scales below ``start_scale`` follow the reconstruction path."""
        out = None
        for n in range(upto + 1):
            prev = self.upsample_to(out, n)
            noise = self._noise(n, rng if n >= start_scale else None)
            out = self.generators[n](noise, prev)
        return out

    @torch.no_grad()
    def reconstruction(self, upto: int | None = None) -> torch.Tensor:
        upto = self.num_scales - 1 if upto is None else upto
        return self.run(upto, self.num_scales, None)

    @torch.no_grad()
    def prev_for(self, n: int, rng: torch.Generator | None) -> torch.Tensor:
        """Upsampled coarser output entering scale ``n`` (random if ``rng`` given)."""
        if n == 0:
            return self.upsample_to(None, 0)
        start = 0 if rng is not None else self.num_scales
        return self.upsample_to(self.run(n - 1, start, rng), n)

    def state(self) -> dict:
        return {
            "generators": [g.state_dict() for g in self.generators],
            "discriminators": [d.state_dict() for d in self.discriminators],
        }


def init_stack(
    schedule: ScaleSchedule,
    width: int = 32,
    seed: int = 0,
    norm: str = "batch",
    num_blocks: int = 5,
    max_width: int = 128,
) -> ModelStack:
    """Fresh, deterministically initialized stack for ``schedule``."""
    if width < 8:
        raise ValueError(f"width must be >= 8, got {width}")
    widths = layer_widths(schedule.num_scales, width, max(width, max_width))
    gens, discs = nn.ModuleList(), nn.ModuleList()
    for n, wd in enumerate(widths):
        g = GeneratorScale(wd, num_blocks, norm)
        d = DiscriminatorScale(wd, num_blocks, norm)
        rng = torch.Generator().manual_seed(seed * 1000 + n)
        init_weights(g, rng)
        init_weights(d, rng)
        gens.append(g)
        discs.append(d)
        log.debug(
            "scale=%d name=%s width=%d g_params=%d d_params=%d",
            n, schedule.generator_name(n), wd, count_parameters(g), count_parameters(d),
        )
    h0, w0 = schedule.dims[0]
    z_star = torch.randn(1, CHANNELS, h0, w0, generator=torch.Generator().manual_seed(seed * 1000 + 999))
    return ModelStack(
        schedule=schedule,
        generators=gens,
        discriminators=discs,
        sigmas=[1.0] * schedule.num_scales,
        z_star=z_star,
        seed=seed,
        norm=norm,
        num_blocks=num_blocks,
        widths=widths,
    )


def to_tensor(fc) -> torch.Tensor:
    """H x W x C array -> 1 x C x H x W float32 tensor."""
    return torch.as_tensor(fc, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_array(x: torch.Tensor):
    """1 x C x H x W tensor -> H x W x C numpy array."""
    return x.detach()[0].permute(1, 2, 0).cpu().numpy()
