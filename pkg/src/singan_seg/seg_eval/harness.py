"""Train/validate segmenters on real or synthetic data: k-fold and small-data protocols."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..dataset_io import SegmentationSample, binarize_mask, make_folds, source_id, FoldSplit
from ..pyramid import resample
from .metrics import METRIC_NAMES, SegMetrics, confusion_counts, dice_loss_soft, seg_metrics
from .model import NestedUNet, SegModelConfig

log = logging.getLogger(__name__)


class LeakageError(ValueError):
    """Training and validation sets share a source image."""


@dataclass
class SegTrainSchedule:
    epochs: int = 300
    lr: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_epoch: int = 50
    batch_size: int = 8
    augment: bool = True
    seed: int = 0
    # stop as soon as validation IoU reaches this value (None: run all epochs)
    target_iou: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SegTrainSchedule":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown seg schedule key: {unknown[0]}")
        return cls(**d)


@dataclass
class TrainOutcome:
    best: SegMetrics
    best_epoch: int
    history: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train loss, val iou


def check_leakage(train, val) -> None:
    train_src = {source_id(s.id) for s in train}
    overlap = sorted(s.id for s in val if source_id(s.id) in train_src)
    if overlap:
        raise LeakageError(f"validation samples share a source image with training data: {', '.join(overlap)}")


def to_tensors(samples, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    images, masks = [], []
    for s in samples:
        img, msk = s.image, s.mask
        if img.shape[:2] != (size, size):
            img = np.clip(resample(img, size, size), 0.0, 1.0)
            msk = binarize_mask(np.clip(resample(msk, size, size), 0.0, 1.0))
        images.append(img)
        masks.append(msk)
    x = torch.as_tensor(np.stack(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    y = torch.as_tensor(np.stack(masks), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    return x, y


def augment(x: torch.Tensor, y: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Random flips, 90-degree rotations and a mild scale-shift-rotate, applied to image and mask alike."""
    if torch.rand(1, generator=gen) < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    if torch.rand(1, generator=gen) < 0.5:
        x, y = x.flip(-2), y.flip(-2)
    k = int(torch.randint(0, 4, (1,), generator=gen))
    x, y = torch.rot90(x, k, (-2, -1)), torch.rot90(y, k, (-2, -1))
    if torch.rand(1, generator=gen) < 0.5:
        n = x.shape[0]
        angle = (torch.rand(n, generator=gen) - 0.5) * (np.pi / 6)
        scale = 1.0 + (torch.rand(n, generator=gen) - 0.5) * 0.2
        shift = (torch.rand(n, 2, generator=gen) - 0.5) * 0.125
        cos, sin = torch.cos(angle) / scale, torch.sin(angle) / scale
        theta = torch.stack([torch.stack([cos, -sin, shift[:, 0]], 1), torch.stack([sin, cos, shift[:, 1]], 1)], 1)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
        y = (F.grid_sample(y, grid, mode="bilinear", padding_mode="reflection", align_corners=False) >= 0.5).float()
    return x, y


@torch.no_grad()
def predict(model: NestedUNet, x: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Foreground probabilities, N x 1 x H x W."""
    model.eval()
    out = [torch.softmax(model(x[i:i + batch_size]), dim=1)[:, 1:2] for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out)


def evaluate(model: NestedUNet, x: torch.Tensor, y: torch.Tensor) -> SegMetrics:
    """Metrics from confusion counts pooled over every validation pixel."""
    pred = (predict(model, x) >= 0.5).numpy()
    return seg_metrics(confusion_counts(pred, y.numpy() >= 0.5))


def train_segmenter(train, val, model_cfg: SegModelConfig | None = None,
                    sched: SegTrainSchedule | None = None) -> tuple[NestedUNet, TrainOutcome]:
    """Train with the soft Dice loss on the foreground channel; keep the best-validation-IoU weights."""
    model_cfg = model_cfg or SegModelConfig()
    sched = sched or SegTrainSchedule()
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    if train is not val:
        check_leakage(train, val)
    torch.manual_seed(sched.seed)
    model = NestedUNet(model_cfg)
    x_tr, y_tr = to_tensors(train, model_cfg.input_size)
    x_va, y_va = (x_tr, y_tr) if val is train else to_tensors(val, model_cfg.input_size)
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr)
    gen = torch.Generator().manual_seed(sched.seed)

    best, best_epoch, best_state, history = None, -1, None, []
    for epoch in range(sched.epochs):
        if epoch == sched.lr_switch_epoch:
            for g in opt.param_groups:
                g["lr"] = sched.lr_after
        model.train()
        order = torch.randperm(x_tr.shape[0], generator=gen)
        total = 0.0
        for i in range(0, len(order), sched.batch_size):
            idx = order[i:i + sched.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if sched.augment:
                xb, yb = augment(xb, yb, gen)
            if xb.shape[0] == 1 and model.training:
                # BatchNorm needs more than one value per channel
                xb, yb = torch.cat([xb, xb.flip(-1)]), torch.cat([yb, yb.flip(-1)])
            probs = torch.softmax(model(xb), dim=1)[:, 1:2]
            loss = dice_loss_soft(probs, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite segmentation loss at epoch={epoch}")
        metrics = evaluate(model, x_va, y_va)
        history.append((epoch, total / len(order), metrics.iou))
        if best is None or metrics.iou > best.iou:
            best, best_epoch = metrics, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch=%d loss=%.4f val_iou=%.4f", epoch, total / len(order), metrics.iou)
        if sched.target_iou is not None and metrics.iou >= sched.target_iou:
            break
    model.load_state_dict(best_state)
    model.eval()
    log.info("best_epoch=%d val_iou=%.4f", best_epoch, best.iou)
    return model, TrainOutcome(best, best_epoch, history)


# -- protocols -----------------------------------------------------------------

@dataclass
class FoldRecord:
    experiment: str
    mode: str
    fold: int
    best_epoch: int
    metrics: SegMetrics
    train_size: int

    def row(self) -> dict:
        return dict(experiment=self.experiment, mode=self.mode, fold=self.fold,
                    best_epoch=self.best_epoch, train_size=self.train_size, **self.metrics.as_dict())


@dataclass
class CVResult:
    mode: str
    folds: list[FoldRecord]

    @property
    def mean(self) -> SegMetrics:
        return SegMetrics.mean(f.metrics for f in self.folds)


def children_of(synthetic, real_ids, n_per_image: int) -> list[SegmentationSample]:
    """First ``n_per_image`` synthetic children (ID order) of each real ID."""
    by_source: dict[str, list[SegmentationSample]] = {}
    for s in sorted(synthetic, key=lambda s: s.id):
        by_source.setdefault(source_id(s.id), []).append(s)
    out = []
    for rid in sorted(real_ids):
        kids = by_source.get(rid, [])
        if len(kids) < n_per_image:
            log.warning("source=%s children=%d requested=%d", rid, len(kids), n_per_image)
        out.extend(kids[:n_per_image])
    return out


def parse_mode(mode: str) -> int:
    """``"REAL"`` -> 0, ``"FAKE-3"`` -> 3."""
    mode = mode.upper()
    if mode == "REAL":
        return 0
    if mode.startswith("FAKE-") and mode[5:].isdigit() and int(mode[5:]) >= 1:
        return int(mode[5:])
    raise ValueError(f"mode must be REAL or FAKE-<n>, got {mode!r}")


def cross_validate(real, synthetic=None, k: int = 3, mode: str = "REAL", model_cfg=None, sched=None,
                   folds: FoldSplit | None = None, experiment: str = "crossval", seed: int = 0) -> CVResult:
    """Train ``k`` models, each validated on one real fold.

    ``REAL`` trains on the other real folds; ``FAKE-N`` trains only on ``N``
    synthetic children of each real image in the other folds.
    """
    n_fake = parse_mode(mode)
    if n_fake and not synthetic:
        raise ValueError(f"mode {mode} needs a synthetic dataset")
    folds = folds or make_folds(real, k, seed)
    records = []
    for f in range(folds.k):
        val = [s for s in real if folds.fold_of(s.id) == f]
        train_real = [s for s in real if folds.fold_of(s.id) != f]
        train = train_real if n_fake == 0 else children_of(synthetic, [s.id for s in train_real], n_fake)
        _, outcome = train_segmenter(train, val, model_cfg, sched)
        records.append(FoldRecord(experiment, mode.upper(), f, outcome.best_epoch, outcome.best, len(train)))
        log.info("experiment=%s mode=%s fold=%d train=%d val=%d iou=%.4f",
                 experiment, mode.upper(), f, len(train), len(val), outcome.best.iou)
    return CVResult(mode.upper(), records)


@dataclass
class SmallDataRow:
    kind: str  # "Real" or "Fake"
    r: int
    size: int
    metrics: SegMetrics
    best_epoch: int


def small_data_experiment(real, R_values=(5, 10, 15, 20, 25, 30, 35, 40, 45, 50), synthetic_source=None,
                          ratio: int = 10, model_cfg=None, sched=None, folds: FoldSplit | None = None,
                          seed: int = 0) -> list[SmallDataRow]:
    """Real (R images from fold 0) versus synthetic (``ratio`` children per image) training sets.

    ``synthetic_source`` is either a list of synthetic samples or a callable
    ``(real_ids, per_image) -> list[SegmentationSample]`` (e.g. generating from
    stored checkpoints). Validation uses the remaining folds.
    """
    if synthetic_source is None:
        raise ValueError("small-data experiment needs a synthetic source")
    sched = sched or SegTrainSchedule(epochs=100)
    folds = folds or make_folds(real, 3, seed)
    pool = sorted((s for s in real if folds.fold_of(s.id) == 0), key=lambda s: s.id)
    pool = [pool[i] for i in np.random.default_rng(seed).permutation(len(pool))]
    val = [s for s in real if folds.fold_of(s.id) != 0]
    rows = []
    for r in R_values:
        if r > len(pool):
            raise ValueError(f"R={r} exceeds the {len(pool)} real images available in fold 0")
        chosen = pool[:r]
        ids = [s.id for s in chosen]
        if callable(synthetic_source):
            fake = synthetic_source(ids, ratio)
        else:
            fake = children_of(synthetic_source, ids, ratio)
        _, real_out = train_segmenter(chosen, val, model_cfg, sched)
        _, fake_out = train_segmenter(fake, val, model_cfg, sched)
        rows.append(SmallDataRow("Real", r, len(chosen), real_out.best, real_out.best_epoch))
        rows.append(SmallDataRow("Fake", r, len(fake), fake_out.best, fake_out.best_epoch))
        log.info("R=%d real_iou=%.4f S=%d fake_iou=%.4f", r, real_out.best.iou, len(fake), fake_out.best.iou)
    first = [row for row in rows if row.r == R_values[0]]
    if len(first) == 2:
        gain = first[1].metrics.iou > first[0].metrics.iou
        log.info("expectation=fake_beats_real_at_smallest_R R=%d holds=%s", R_values[0], gain)
    return rows


# -- tables ------------------------------------------------------------------

_HEADER = ["Dice loss", "IoU", "f-score", "Accuracy", "Recall", "Precision"]


def _cells(m: SegMetrics) -> list[str]:
    return [f"{getattr(m, k):.4f}" for k in METRIC_NAMES]


def write_fold_csv(results: list[CVResult], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["experiment", "mode", "fold", "best_epoch", "train_size", *METRIC_NAMES],
                           lineterminator="\n")
        w.writeheader()
        for res in results:
            for rec in res.folds:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in rec.row().items()})
    return path


def crossval_markdown(results: dict[tuple[str, str], CVResult], scale_note: str = "") -> str:
    """Rows keyed by (train data, style label), e.g. ``("FAKE-2", "1:1000")``; fold rows plus a mean row."""
    lines = ["| Train data | ST (cw:sw) | Fold | " + " | ".join(_HEADER) + " |", "|" + "---|" * (len(_HEADER) + 3)]
    for (mode, st), res in results.items():
        for rec in res.folds:
            lines.append(f"| {mode} | {st} | {rec.fold} | " + " | ".join(_cells(rec.metrics)) + " |")
        lines.append(f"| {mode} | {st} | mean | " + " | ".join(_cells(res.mean)) + " |")
    if scale_note:
        lines += ["", scale_note]
    return "\n".join(lines) + "\n"


def small_data_markdown(rows: list[SmallDataRow], scale_note: str = "") -> str:
    lines = ["| | # | " + " | ".join(_HEADER) + " |", "|" + "---|" * (len(_HEADER) + 2)]
    for row in rows:
        lines.append(f"| {row.kind} | {row.size} | " + " | ".join(_cells(row.metrics)) + " |")
    if scale_note:
        lines += ["", scale_note]
    return "\n".join(lines) + "\n"


def write_small_data_csv(rows: list[SmallDataRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "R", "train_size", "best_epoch", *METRIC_NAMES])
        for row in rows:
            w.writerow([row.kind, row.r, row.size, row.best_epoch, *[f"{getattr(row.metrics, k):.6f}" for k in METRIC_NAMES]])
    return path


def write_iou_plot_data(rows: list[SmallDataRow], path: str | Path) -> Path:
    """One line per R: real IoU next to synthetic IoU."""
    path = Path(path)
    by_r: dict[int, dict[str, float]] = {}
    for row in rows:
        by_r.setdefault(row.r, {})[row.kind] = row.metrics.iou
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["R", "S", "real_iou", "fake_iou"])
        sizes = {row.r: row.size for row in rows if row.kind == "Fake"}
        for r, d in by_r.items():
            w.writerow([r, sizes.get(r, ""), f"{d.get('Real', float('nan')):.6f}", f"{d.get('Fake', float('nan')):.6f}"])
    return path
