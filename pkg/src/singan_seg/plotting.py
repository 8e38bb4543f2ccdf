"""Figures written next to the CSV/Markdown outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset_io import histogram_from_percentages  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}
# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def true_pixel_histograms(groups: dict[str, list[float]], path, bin_size: float = 5.0, title: str = "") -> Path:
    """One histogram panel per group of true-pixel percentages."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(groups), figsize=(3.2 * len(groups), 2.6), squeeze=False, sharey=True)
        for ax, (label, values) in zip(axes[0], groups.items()):
            bins = histogram_from_percentages(values, bin_size)
            ax.bar([lo for lo, _ in bins], [c for _, c in bins], width=bin_size, align="edge",
                   color="#b5523b", edgecolor="white", linewidth=0.5)
            ax.set_xlim(0, 100)
            ax.set_title(f"{label} (n={len(values)})")
            ax.set_xlabel("true pixels (%)")
        axes[0][0].set_ylabel("count")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def mask_diversity_figure(rows: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]], path) -> Path:
    """Rows of (label, real mask, mean image, std image)."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(rows), 3, figsize=(6.0, 2.0 * len(rows)), squeeze=False)
        for r, (label, mask, mean, std) in enumerate(rows):
            for c, (img, name) in enumerate(((mask, "mask"), (mean, "mean"), (std, "std"))):
                ax = axes[r][c]
                ax.imshow(np.squeeze(img), cmap="gray", vmin=0.0, vmax=1.0 if c < 2 else 0.5)
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
                if r == 0:
                    ax.set_title(name)
            axes[r][0].set_ylabel(label)
        return _save(fig, path)


def metric_sets_figure(table: dict[str, list[float]], path, metric: str = "FID") -> Path:
    """Mean +/- SD bar per target dataset, individual sets as dots."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.4 + 1.1 * len(table), 2.8))
        for i, (label, values) in enumerate(table.items()):
            v = np.asarray(values, dtype=float)
            ax.bar(i, v.mean(), yerr=v.std(), color="#4c72b0", alpha=0.7, capsize=3)
            ax.plot(np.full(v.size, i), v, "k.", ms=4)
        ax.set_xticks(range(len(table)))
        ax.set_xticklabels(list(table), rotation=20, ha="right")
        ax.set_ylabel(metric)
        return _save(fig, path)


def fold_metrics_figure(rows: dict[str, dict[str, float]], path, metrics=("iou", "f_score", "precision", "recall")) -> Path:
    """Grouped bars of mean fold metrics per experiment row."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(rows), 2.8))
        width = 0.8 / len(metrics)
        for j, m in enumerate(metrics):
            ax.bar(np.arange(len(rows)) + j * width, [r[m] for r in rows.values()], width, label=m)
        ax.set_xticks(np.arange(len(rows)) + 0.4 - width / 2)
        ax.set_xticklabels(list(rows), rotation=25, ha="right")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7, ncol=len(metrics))
        return _save(fig, path)


def iou_comparison_figure(r_values, real_iou, fake_iou, path) -> Path:
    """IoU of real (R images) against synthetic (10R images) training sets."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.plot(r_values, real_iou, "o-", label="real (R)")
        ax.plot(r_values, fake_iou, "s--", label="synthetic (10R)")
        ax.set_xlabel("R (real images)")
        ax.set_ylabel("IoU")
        ax.legend()
        return _save(fig, path)
