"""Coarse-to-fine adversarial training of a four-channel model stack and checkpoint I/O."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset_io import SegmentationSample, stack_four_channel
from .networks import ModelStack, init_stack, to_tensor
from .pyramid import ScaleSchedule, build_pyramid, compute_scale_schedule, resample

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
REQUIRED_MANIFEST_FIELDS = (
    "format_version", "source_id", "schedule", "widths", "norm", "num_blocks",
    "sigmas", "seed", "config", "config_hash", "blobs", "zstar", "digest",
)


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite."""


class CheckpointError(Exception):
    """Invalid, incomplete or corrupt checkpoint directory."""


@dataclass
class TrainConfig:
    epochs_per_scale: int = 2000
    g_steps: int = 3
    d_steps: int = 3
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lr_decay_at: float = 0.8
    grad_penalty_weight: float = 0.1
    recon_weight: float = 10.0
    seed: int = 0
    width: int = 32
    norm: str = "batch"
    scale_factor: float = 0.75
    min_dim: int = 25
    max_dim: int = 250

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs_per_scale < 1:
            raise ValueError("epochs_per_scale must be >= 1")
        for name in ("g_steps", "d_steps", "learning_rate", "grad_penalty_weight", "recon_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config key: {unknown[0]}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class LossRecord:
    epoch: int
    scale: int
    d_loss: float
    g_adv: float
    g_rec: float


@dataclass
class Checkpoint:
    stack: ModelStack
    source_id: str
    config: dict
    config_hash: str
    losses: list[LossRecord] = field(default_factory=list)

    @property
    def schedule(self) -> ScaleSchedule:
        return self.stack.schedule

    @property
    def sigmas(self) -> list[float]:
        return self.stack.sigmas

    def digest(self) -> str:
        return _manifest(self, _blobs(self))["digest"]


def critic_input_gradient(disc, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Gradient of the summed patch-score map with respect to the critic input ``x``."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(disc(x).sum(), x, create_graph=create_graph)
    return grad


def penalty_at(disc, x_hat: torch.Tensor) -> torch.Tensor:
    """``mean((||grad||_2 - 1)^2)`` with the norm over channels at each pixel."""
    grad = critic_input_gradient(disc, x_hat)
    return ((grad.norm(2, dim=1) - 1.0) ** 2).mean()


def gradient_penalty(disc, real: torch.Tensor, fake: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """Penalty at random interpolates of ``real`` and ``fake``.

    One interpolation weight is drawn per sample. The result is
    differentiable w.r.t. the critic parameters.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    x_hat = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    return penalty_at(disc, x_hat)


def reconstruction_loss(stack: ModelStack, pyramid: list[torch.Tensor], n: int) -> torch.Tensor:
    """Squared error between level ``n`` and the fixed-noise path through scale ``n``."""
    prev = stack.prev_for(n, None)
    noise = stack._noise(n, None)
    return F.mse_loss(stack.generators[n](noise, prev), pyramid[n])


def _check_finite(epoch: int, n: int, **losses: float) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        detail = " ".join(f"{k}={v}" for k, v in losses.items())
        raise TrainingDivergedError(f"non-finite loss at scale={n} epoch={epoch}: {detail}")


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def train_scale(stack: ModelStack, pyramid: list[torch.Tensor], n: int, cfg: TrainConfig) -> list[LossRecord]:
    """Train scale ``n`` with coarser scales frozen; sets ``stack.sigmas[n]``."""
    for m in range(stack.num_scales):
        _set_trainable(stack.generators[m], m == n)
        _set_trainable(stack.discriminators[m], m == n)
    G, D = stack.generators[n], stack.discriminators[n]
    G.train()
    D.train()
    real = pyramid[n]

    rec_prev = stack.prev_for(n, None)
    if n > 0:
        stack.sigmas[n] = float(torch.sqrt(F.mse_loss(rec_prev, real)))
    else:
        stack.sigmas[n] = 1.0
    rec_noise = stack._noise(n, None)
    sigma = stack.sigmas[n]

    rng = torch.Generator().manual_seed(cfg.seed * 7919 + n)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    milestone = [max(1, int(cfg.lr_decay_at * cfg.epochs_per_scale))]
    sched_g = torch.optim.lr_scheduler.MultiStepLR(opt_g, milestone, gamma=0.1)
    sched_d = torch.optim.lr_scheduler.MultiStepLR(opt_d, milestone, gamma=0.1)

    records = []
    for epoch in range(cfg.epochs_per_scale):
        noise = torch.randn(real.shape, generator=rng) * sigma
        prev = stack.prev_for(n, rng)

        d_loss = 0.0
        for _ in range(cfg.d_steps):
            opt_d.zero_grad()
            with torch.no_grad():
                fake = G(noise, prev)
            loss = -D(real).mean() + D(fake).mean()
            if cfg.grad_penalty_weight > 0:
                loss = loss + cfg.grad_penalty_weight * gradient_penalty(D, real, fake, rng)
            loss.backward()
            opt_d.step()
            d_loss = loss.item()

        g_adv = g_rec = 0.0
        for _ in range(cfg.g_steps):
            opt_g.zero_grad()
            adv = -D(G(noise, prev)).mean()
            rec = F.mse_loss(G(rec_noise, rec_prev), real)
            loss = adv + cfg.recon_weight * rec if cfg.recon_weight > 0 else adv
            loss.backward()
            opt_g.step()
            g_adv, g_rec = adv.item(), rec.item()

        _check_finite(epoch, n, d_loss=d_loss, g_adv=g_adv, g_rec=g_rec)
        if cfg.g_steps:
            sched_g.step()
        if cfg.d_steps:
            sched_d.step()
        records.append(LossRecord(epoch, n, d_loss, g_adv, g_rec))
        if (epoch + 1) % max(1, cfg.epochs_per_scale // 4) == 0:
            log.info(
                "scale=%d name=%s epoch=%d d_loss=%.5f g_adv=%.5f g_rec=%.6f sigma=%.5f",
                n, stack.schedule.generator_name(n), epoch + 1, d_loss, g_adv, g_rec, sigma,
            )

    G.eval()
    D.eval()
    _set_trainable(G, False)
    _set_trainable(D, False)
    return records


def prepare_sample(sample: SegmentationSample, cfg: TrainConfig) -> tuple[ScaleSchedule, list[np.ndarray]]:
    h, w = sample.image.shape[:2]
    schedule = compute_scale_schedule(h, w, cfg.scale_factor, cfg.min_dim, cfg.max_dim)
    fc = stack_four_channel(sample.image, sample.mask)
    if tuple(fc.shape[:2]) != schedule.finest:
        fc = resample(fc, *schedule.finest)
    return schedule, build_pyramid(fc, schedule)


def train_all(sample: SegmentationSample, cfg: TrainConfig) -> Checkpoint:
    """Train every scale of a fresh stack on one image+mask pair, coarsest first."""
    torch.use_deterministic_algorithms(True)
    schedule, levels = prepare_sample(sample, cfg)
    pyramid = [to_tensor(x) for x in levels]
    stack = init_stack(schedule, cfg.width, cfg.seed, cfg.norm)
    log.info("sample=%s scales=%d dims=%s", sample.id, schedule.num_scales, list(schedule.dims))
    losses = []
    for n in range(schedule.num_scales):
        if n > 0 and stack.widths[n] == stack.widths[n - 1]:
            stack.generators[n].load_state_dict(stack.generators[n - 1].state_dict())
            stack.discriminators[n].load_state_dict(stack.discriminators[n - 1].state_dict())
        losses.extend(train_scale(stack, pyramid, n, cfg))
    return Checkpoint(stack, sample.id, cfg.to_dict(), cfg.digest(), losses)


# -- serialization -------------------------------------------------------------

def _state_blob(state: dict) -> tuple[bytes, list]:
    buf = io.BytesIO()
    layout = []
    for key, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        buf.write(arr.tobytes())
        layout.append([key, list(arr.shape)])
    return buf.getvalue(), layout


def _blobs(ckpt: Checkpoint) -> dict[str, tuple[bytes, list]]:
    out = {}
    for n, (g, d) in enumerate(zip(ckpt.stack.generators, ckpt.stack.discriminators)):
        out[f"scale{n}_G.bin"] = _state_blob(g.state_dict())
        out[f"scale{n}_D.bin"] = _state_blob(d.state_dict())
    out["zstar.bin"] = _state_blob({"z_star": ckpt.stack.z_star})
    return out


def _losses_csv(losses: list[LossRecord]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "scale", "d_loss", "g_adv", "g_rec"])
    for r in losses:
        w.writerow([r.epoch, r.scale, repr(r.d_loss), repr(r.g_adv), repr(r.g_rec)])
    return buf.getvalue().encode()


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _canonical(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _manifest(ckpt: Checkpoint, blobs: dict) -> dict:
    s = ckpt.stack
    m = {
        "format_version": FORMAT_VERSION,
        "source_id": ckpt.source_id,
        "schedule": s.schedule.to_dict(),
        "widths": list(s.widths),
        "norm": s.norm,
        "num_blocks": s.num_blocks,
        "sigmas": [float(x) for x in s.sigmas],
        "seed": s.seed,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "blobs": {
            name: {"sha256": _sha(data), "size": len(data), "tensors": layout}
            for name, (data, layout) in blobs.items() if name != "zstar.bin"
        },
        "zstar": {"file": "zstar.bin", "sha256": _sha(blobs["zstar.bin"][0]), "shape": list(s.z_star.shape)},
        "losses": {"file": "losses.csv", "sha256": _sha(_losses_csv(ckpt.losses))},
    }
    m["digest"] = _sha(_canonical(m))
    return m


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write blobs, ``losses.csv`` and finally ``manifest.json`` (its presence marks completion)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blobs = _blobs(ckpt)
    for name, (data, _) in blobs.items():
        (d / name).write_bytes(data)
    (d / "losses.csv").write_bytes(_losses_csv(ckpt.losses))
    manifest = _manifest(ckpt, blobs)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def _read_blob(d: Path, name: str, sha: str, size: int | None = None) -> bytes:
    path = d / name
    if not path.exists():
        raise CheckpointError(f"missing blob: {name}")
    data = path.read_bytes()
    if size is not None and len(data) != size:
        raise CheckpointError(f"corrupt blob {name}: expected {size} bytes, found {len(data)} (truncated?)")
    if _sha(data) != sha:
        raise CheckpointError(f"corrupt blob {name}: sha256 mismatch")
    return data


def _unpack(data: bytes, layout: list) -> dict:
    arr = np.frombuffer(data, dtype="<f4")
    state, pos = {}, 0
    for key, shape in layout:
        count = int(np.prod(shape)) if shape else 1
        state[key] = torch.from_numpy(arr[pos:pos + count].reshape(shape).copy())
        pos += count
    if pos != arr.size:
        raise CheckpointError("blob size does not match its tensor layout")
    return state


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    for key in REQUIRED_MANIFEST_FIELDS:
        if key not in m:
            raise CheckpointError(f"manifest missing field: {key}")
    body = {k: v for k, v in m.items() if k != "digest"}
    if _sha(_canonical(body)) != m["digest"]:
        raise CheckpointError("manifest hash mismatch")
    return m


def load_checkpoint(directory: str | Path) -> Checkpoint:
    d = Path(directory)
    m = read_manifest(d)
    schedule = ScaleSchedule.from_dict(m["schedule"])
    if len(m["sigmas"]) != schedule.num_scales:
        raise CheckpointError("sigma list length does not match the number of scales")
    stack = init_stack(schedule, m["widths"][0], m["seed"], m["norm"], m["num_blocks"], max(m["widths"]))
    if stack.widths != m["widths"]:
        raise CheckpointError(f"width schedule mismatch: {stack.widths} vs {m['widths']}")
    for n in range(schedule.num_scales):
        for kind, modules in (("G", stack.generators), ("D", stack.discriminators)):
            name = f"scale{n}_{kind}.bin"
            if name not in m["blobs"]:
                raise CheckpointError(f"manifest missing blob entry: {name}")
            info = m["blobs"][name]
            modules[n].load_state_dict(_unpack(_read_blob(d, name, info["sha256"], info["size"]), info["tensors"]))
            modules[n].eval()
            _set_trainable(modules[n], False)
    z = m["zstar"]
    stack.z_star = _unpack(_read_blob(d, z["file"], z["sha256"]), [["z_star", z["shape"]]])["z_star"]
    stack.sigmas = [float(s) for s in m["sigmas"]]
    losses = []
    if (d / "losses.csv").exists():
        with open(d / "losses.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                losses.append(LossRecord(int(row["epoch"]), int(row["scale"]), float(row["d_loss"]),
                                         float(row["g_adv"]), float(row["g_rec"])))
    return Checkpoint(stack, m["source_id"], m["config"], m["config_hash"], losses)


def is_complete(directory: str | Path) -> bool:
    try:
        read_manifest(directory)
    except CheckpointError:
        return False
    return True


@contextlib.contextmanager
def directory_lock(directory: str | Path):
    """Exclusive ``.lock`` file so one trainer owns a checkpoint directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CheckpointError(f"{d} is locked by another training job") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield d
    finally:
        lock.unlink(missing_ok=True)
