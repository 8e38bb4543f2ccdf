"""Image+mask datasets, four-channel packing, mask statistics and fold splits.

On disk a dataset is ``root/images/<id>.png|jpg`` plus ``root/masks/<id>.png|jpg``.
In memory images live in the storage range ``[0, 1]`` and masks in ``{0, 1}``;
the GAN works in the model range ``[-1, 1]`` on all four channels.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_SIDE = 25

_SYNTHETIC_ID = re.compile(r"^(?P<source>.+)_s(?P<index>\d+)$")


class DatasetError(Exception):
    """Raised for missing, unreadable or inconsistent dataset files."""


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W x 1, float32 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.ndim == 2:
            self.mask = self.mask[..., None]
        if self.mask.shape[:2] != self.image.shape[:2] or self.mask.shape[2] != 1:
            raise ValueError(
                f"{self.id}: mask shape {self.mask.shape} does not match image {self.image.shape}"
            )

    @property
    def source_id(self) -> str:
        return source_id(self.id)


def source_id(sample_id: str) -> str:
    """Real-image ID a sample descends from (``img7_s03`` -> ``img7``)."""
    m = _SYNTHETIC_ID.match(sample_id)
    return m.group("source") if m else sample_id


def synthetic_id(real_id: str, index: int) -> str:
    return f"{real_id}_s{index:02d}"


def _find(directory: Path, stem: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def _read(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable file: {path} ({exc})") from exc


def read_image(path: str | Path) -> np.ndarray:
    return _read(Path(path), "RGB")


def read_mask(path: str | Path, threshold: float = 0.5) -> np.ndarray:
    return binarize_mask(_read(Path(path), "L")[..., None], threshold)


def _load_pair(sample_id: str, image_path: Path, mask_path: Path) -> SegmentationSample:
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[:2] != mask.shape[:2]:
        raise DatasetError(
            f"size mismatch for {sample_id}: image {image.shape[:2]} vs mask {mask.shape[:2]}"
        )
    if min(image.shape[:2]) < MIN_SIDE:
        raise DatasetError(f"{sample_id}: image smaller than {MIN_SIDE} px")
    return SegmentationSample(sample_id, image, mask)


def load_dataset(root_dir: str | Path, manifest: str | Path | None = None) -> list[SegmentationSample]:
    """Load every image/mask pair under ``root_dir``, sorted by ID.

    With a ``manifest`` (JSON list of ``{id, image_path, mask_path}``, paths
    relative to ``root_dir`` unless absolute) only the listed pairs are read.
    """
    root = Path(root_dir)
    if manifest is not None:
        entries = json.loads(Path(manifest).read_text())
        pairs = []
        for e in entries:
            img, msk = root / e["image_path"], root / e["mask_path"]
            if not img.exists():
                raise DatasetError(f"missing image: {e['id']}")
            if not msk.exists():
                raise DatasetError(f"missing mask: {e['id']}")
            pairs.append((e["id"], img, msk))
    else:
        images_dir, masks_dir = root / "images", root / "masks"
        if not images_dir.is_dir() or not masks_dir.is_dir():
            raise DatasetError(f"{root} must contain images/ and masks/ subdirectories")
        pairs = []
        for img in sorted(images_dir.iterdir()):
            if img.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            msk = _find(masks_dir, img.stem)
            if msk is None:
                raise DatasetError(f"missing mask: {img.stem}")
            pairs.append((img.stem, img, msk))
    pairs.sort(key=lambda p: p[0])
    return [_load_pair(*p) for p in pairs]


def list_image_ids(root_dir: str | Path) -> list[str]:
    images_dir = Path(root_dir) / "images"
    return sorted(p.stem for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(to_uint8(mask[..., 0])).save(path)


def save_sample(sample: SegmentationSample, root_dir: str | Path) -> None:
    """Write a sample as ``images/<id>.png`` and ``masks/<id>.png`` under ``root_dir``."""
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_image(root / "images" / f"{sample.id}.png", sample.image)
    write_mask(root / "masks" / f"{sample.id}.png", sample.mask)


def stack_four_channel(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pack an RGB image and its mask into one H x W x 4 array in model range."""
    if mask.ndim == 2:
        mask = mask[..., None]
    if image.shape[:2] != mask.shape[:2] or image.shape[2] != 3 or mask.shape[2] != 1:
        raise ValueError(f"cannot stack image {image.shape} with mask {mask.shape}")
    fc = np.concatenate([image, mask], axis=2).astype(np.float32)
    return 2.0 * fc - 1.0


def split_four_channel(fc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`stack_four_channel`; the returned mask is not binarized."""
    storage = np.clip((np.asarray(fc, dtype=np.float32) + 1.0) / 2.0, 0.0, 1.0)
    return storage[..., :3], storage[..., 3:4]


def binarize_mask(raw_mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(raw_mask) >= threshold).astype(np.float32)


def true_pixel_percentage(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    h, w = mask.shape[:2]
    return 100.0 * float(np.count_nonzero(mask)) / (h * w)


def histogram_from_percentages(percentages, bin_size: float = 5.0) -> list[tuple[float, int]]:
    if bin_size <= 0 or bin_size > 100:
        raise ValueError(f"bin_size must lie in (0, 100], got {bin_size}")
    n_bins = 100.0 / bin_size
    if abs(n_bins - round(n_bins)) > 1e-9:
        raise ValueError(f"bin_size {bin_size} does not divide 100")
    n_bins = int(round(n_bins))
    counts = [0] * n_bins
    for p in percentages:
        # last bin is closed at 100
        idx = min(int(np.floor(p / bin_size + 1e-9)), n_bins - 1)
        counts[idx] += 1
    return [(i * bin_size, c) for i, c in enumerate(counts)]


def mask_histogram(masks, bin_size: float = 5.0) -> list[tuple[float, int]]:
    """Histogram of true-pixel percentages with bins ``[0, b), [b, 2b), ... [100-b, 100]``."""
    return histogram_from_percentages([true_pixel_percentage(m) for m in masks], bin_size)


@dataclass
class FoldSplit:
    k: int
    seed: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_of(self, sample_id: str) -> int:
        if sample_id in self.assignments:
            return self.assignments[sample_id]
        return self.assignments[source_id(sample_id)]

    def members(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "k": self.k, "assignments": dict(sorted(self.assignments.items()))},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        d = json.loads(text)
        return cls(k=int(d["k"]), seed=int(d["seed"]), assignments={k: int(v) for k, v in d["assignments"].items()})


def make_folds(samples, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle of real source IDs, then round-robin over ``k`` folds.

    ``samples`` may be :class:`SegmentationSample` objects or bare IDs.
    Synthetic samples land in the fold of their source real image.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ids = [s if isinstance(s, str) else s.id for s in samples]
    sources = sorted({source_id(i) for i in ids})
    if k > len(sources):
        raise ValueError(f"cannot split {len(sources)} source images into {k} folds")
    order = np.random.default_rng(seed).permutation(len(sources))
    fold_of_source = {sources[j]: pos % k for pos, j in enumerate(order)}
    assignments = {i: fold_of_source[source_id(i)] for i in ids}
    return FoldSplit(k=k, seed=seed, assignments=assignments)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digest(root: str | Path) -> str:
    """SHA-256 over every file (relative path and bytes) below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(x for x in root.rglob("*") if x.is_file() and x.name != ".lock"):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
