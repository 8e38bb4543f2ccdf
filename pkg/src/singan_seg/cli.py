"""Command-line entry point: train-gan -> generate -> style-transfer -> metrics -> seg / report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ConfigError, check_keys, load_config, merge, resolve
from .dataset_io import (
    DatasetError, file_sha256, list_image_ids, load_dataset, make_folds, mask_histogram,
    read_mask, source_id, true_pixel_percentage, tree_digest,
)
from .pyramid import PyramidError
from .sampler import export_samples, generate_samples, mask_diversity, write_generation_manifest
from .seg_eval.harness import (
    LeakageError, SegTrainSchedule, cross_validate, crossval_markdown, small_data_experiment,
    small_data_markdown, write_fold_csv, write_iou_plot_data, write_small_data_csv,
)
from .seg_eval.model import SegModelConfig
from .style_transfer import StyleConfig, parse_ratio, stylize_dataset
from .trainer import (
    CheckpointError, TrainConfig, TrainingDivergedError, directory_lock, is_complete,
    load_checkpoint, read_manifest, save_checkpoint, train_all,
)

log = logging.getLogger("singan_seg.cli")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DESK_NOTE = ("Desk-scale run: values come from the local dataset and short schedules "
             "and are not comparable in magnitude to full-scale results.")


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _public(values: dict) -> dict:
    return {k: v for k, v in values.items() if not k.startswith("_")}


# -- train-gan -------------------------------------------------------------------

TRAIN_KEYS = {"dataset", "out", "ids", "workers"} | {f.name for f in fields(TrainConfig)}


def _train_job(args) -> str:
    root, sample_id, cfg_dict, out_dir, threads = args
    if threads:
        import torch

        torch.set_num_threads(threads)
    sample = next(s for s in load_dataset(root) if s.id == sample_id)
    with directory_lock(out_dir):
        ckpt = train_all(sample, TrainConfig.from_dict(cfg_dict))
        save_checkpoint(ckpt, out_dir)
    log.info("trained=%s digest=%s", sample_id, ckpt.digest()[:16])
    return sample_id


def cmd_train_gan(values: dict, force: bool = False) -> list[Path]:
    check_keys("train", values, TRAIN_KEYS)
    root, out = resolve(values, "dataset"), resolve(values, "out")
    cfg_dict = {k: v for k, v in values.items() if k in {f.name for f in fields(TrainConfig)}}
    cfg = TrainConfig.from_dict(cfg_dict)
    available = list_image_ids(root) if (root / "images").is_dir() else []
    if not available:
        raise DatasetError(f"no images found under {root}")
    ids = values.get("ids", "all")
    ids = available if ids == "all" else sorted(ids)
    missing = [i for i in ids if i not in available]
    if missing:
        raise DatasetError(f"unknown image id(s): {', '.join(missing)}")

    jobs, skipped, dirs = [], 0, []
    for sid in ids:
        d = out / sid
        dirs.append(d)
        if is_complete(d) and not force:
            skipped += 1
            continue
        if d.exists() and any(d.iterdir()):
            if not force:
                raise CheckpointError(f"partial checkpoint in {d}; rerun with --force to overwrite")
            shutil.rmtree(d)
        jobs.append(sid)
    if skipped:
        log.info("skipped: %d existing", skipped)
        print(f"skipped: {skipped} existing")

    workers = int(values.get("workers", 1))
    args = [(str(root), sid, cfg.to_dict(), str(out / sid), 1 if workers > 1 else 0) for sid in jobs]
    if workers > 1 and len(args) > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            pool.map(_train_job, args)
    else:
        for a in args:
            _train_job(a)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "train_manifest.json", {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "ids": ids,
        "inputs": {sid: {"image": file_sha256(next((root / "images").glob(f"{sid}.*"))),
                         "mask": file_sha256(next((root / "masks").glob(f"{sid}.*")))} for sid in ids},
    })
    return dirs


# -- generate ----------------------------------------------------------------------

GENERATE_KEYS = {"checkpoints", "n", "start_scale", "seed", "out", "threshold"}


def find_checkpoints(directory: Path) -> list[Path]:
    if (directory / "manifest.json").exists():
        return [directory]
    if not directory.is_dir():
        raise DatasetError(f"checkpoint directory not found: {directory}")
    found = sorted(p for p in directory.iterdir() if (p / "manifest.json").exists())
    if not found:
        raise DatasetError(f"no checkpoints found in {directory}")
    return found


def cmd_generate(values: dict) -> Path:
    check_keys("generate", values, GENERATE_KEYS)
    n = int(values.get("n", 10))
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    start_scale = int(values.get("start_scale", 0))
    seed = int(values.get("seed", 0))
    threshold = float(values.get("threshold", 0.5))
    ckpt_dirs = find_checkpoints(resolve(values, "checkpoints"))
    out = resolve(values, "out")
    entries = []
    for d in ckpt_dirs:
        ckpt = load_checkpoint(d)
        entries.append(export_samples(ckpt, out, n, start_scale, seed, threshold))
        log.info("generated=%s n=%d flagged=%d", ckpt.source_id, n, len(entries[-1]["flagged_empty"]))
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_generation_manifest(out, entries, n=n, start_scale=start_scale, seed=seed, threshold=threshold)
    return out


# -- style-transfer ------------------------------------------------------------------

STYLE_KEYS = {"gen", "real", "out", "ratio", "epochs", "step_size", "content_layers", "style_layers", "seed"}


def style_config(values: dict) -> StyleConfig:
    d = {k: values[k] for k in ("epochs", "step_size", "content_layers", "style_layers", "seed") if k in values}
    if "ratio" in values:
        d["content_weight"], d["style_weight"] = parse_ratio(values["ratio"])
    return StyleConfig(**d)


def cmd_style_transfer(values: dict) -> Path:
    check_keys("style", values, STYLE_KEYS)
    cfg = style_config(values)
    gen, real, out = resolve(values, "gen"), resolve(values, "real"), resolve(values, "out")
    if not gen.is_dir():
        raise DatasetError(f"generated dataset not found: {gen}")
    stylize_dataset(gen, real, out, cfg)
    manifest = json.loads((out / "style_manifest.json").read_text())
    manifest["inputs"] = {"generated": tree_digest(gen / "images"), "real": tree_digest(real / "images")}
    _dump(out / "style_manifest.json", manifest)
    return out


# -- metrics ---------------------------------------------------------------------------

METRICS_KEYS = {"a", "b", "metric", "sets", "out", "checkpoints", "seed"}


def _set_dirs(b: Path, sets: int, values: dict, out: Path) -> list[Path]:
    subdirs = sorted(p for p in b.iterdir() if p.is_dir() and (p / "images").is_dir())
    if len(subdirs) >= sets:
        return subdirs[:sets]
    manifest = b / "generation_manifest.json"
    ckpt_root = resolve(values, "checkpoints", required=False)
    if not manifest.exists() or ckpt_root is None:
        raise ConfigError(f"sets={sets} needs {sets} set subdirectories in {b} or a generation manifest plus checkpoints")
    gen = json.loads(manifest.read_text())
    ckpts = {load_checkpoint(d).source_id: d for d in find_checkpoints(ckpt_root)}
    dirs = []
    for i in range(sets):
        d = out.parent / f"{out.name}_sets" / f"set{i + 1}"
        if d.exists():
            shutil.rmtree(d)
        for entry in gen["checkpoints"]:
            if entry["checkpoint_id"] not in ckpts:
                raise DatasetError(f"missing checkpoint: {entry['checkpoint_id']}")
            export_samples(load_checkpoint(ckpts[entry["checkpoint_id"]]), d, gen["n"], gen["start_scale"],
                           gen["seed"] + i + 1, gen.get("threshold", 0.5))
        dirs.append(d)
    return dirs


def cmd_metrics(values: dict) -> tuple[Path, Path]:
    check_keys("metrics", values, METRICS_KEYS)
    metric = str(values.get("metric", "fid")).lower()
    if metric not in ("fid", "sifid"):
        raise ConfigError(f"unknown metric: {metric}")
    sets = int(values.get("sets", 1))
    a, b, out = resolve(values, "a"), resolve(values, "b"), resolve(values, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    targets = [b] if sets == 1 else _set_dirs(b, sets, values, out)
    results, pairs = [], []
    for i, target in enumerate(targets, start=1):
        if metric == "fid":
            value = M.fid(a, target)
        else:
            value, per_pair = M.sifid(a, target)
            pairs += [(i, fid_id, v) for fid_id, v in per_pair]
        results.append(M.MetricResult(a.name, b.name, metric, i, value))
        log.info("metric=%s set=%d value=%.6f", metric, i, value)
    csv_path, md_path = M.report(results, out, notes=DESK_NOTE)
    if pairs:
        lines = ["set_id,fake_id,value"] + [f"{s},{fid_id},{v:.6f}" for s, fid_id, v in pairs]
        out.with_name(out.name + "_pairs.csv").write_text("\n".join(lines) + "\n")
    from . import extractors, plotting

    plotting.metric_sets_figure({b.name: [r.value for r in results]}, out.with_suffix(".png"), metric.upper())
    _dump(out.with_suffix(".json"), {
        "metric": metric, "sets": sets, "a": a.name, "b": b.name,
        "inputs": {"a": tree_digest(a / "images" if (a / "images").is_dir() else a),
                   "b": [tree_digest(t / "images" if (t / "images").is_dir() else t) for t in targets]},
        "extractor_weights_hash": extractors.inception().weights_hash,
        "extractor_source": extractors.inception().source,
        "preprocessing": M.PREPROCESSING,
    })
    return csv_path, md_path


# -- seg ------------------------------------------------------------------------------------

SEG_KEYS = {"real", "out", "k", "seed", "model", "schedule", "crossval", "smalldata"}


def _seg_setup(values: dict):
    check_keys("seg", values, SEG_KEYS)
    real_dir, out = resolve(values, "real"), resolve(values, "out")
    if not real_dir.exists():
        raise DatasetError(f"dataset not found: {real_dir}")
    model_cfg = SegModelConfig.from_dict(values.get("model", {}))
    sched = values.get("schedule", {})
    out.mkdir(parents=True, exist_ok=True)
    return load_dataset(real_dir), out, model_cfg, sched


def cmd_seg_crossval(values: dict) -> Path:
    from . import plotting

    real, out, model_cfg, sched_d = _seg_setup(values)
    sched = SegTrainSchedule.from_dict(sched_d)
    opts = values.get("crossval", {})
    check_keys("seg.crossval", opts, {"synthetic", "n_values", "modes"})
    k, seed = int(values.get("k", 3)), int(values.get("seed", 0))
    folds = make_folds(real, k, seed)
    (out / "folds.json").write_text(folds.to_json() + "\n")
    results = {("REAL", "-"): cross_validate(real, None, k, "REAL", model_cfg, sched, folds, "real")}
    base = Path(values.get("_base", "."))
    for label, d in opts.get("synthetic", {}).items():
        d = Path(d) if Path(d).is_absolute() else base / d
        if not d.exists():
            raise DatasetError(f"dataset not found: {d}")
        synthetic = load_dataset(d)
        for n in opts.get("n_values", [1]):
            mode = f"FAKE-{n}"
            results[(mode, label)] = cross_validate(real, synthetic, k, mode, model_cfg, sched, folds, f"fake-{label}")
    write_fold_csv(list(results.values()), out / "crossval_folds.csv")
    (out / "crossval.md").write_text(crossval_markdown(results, DESK_NOTE))
    rows = {f"{m} {st}".strip(" -"): res.mean.as_dict() for (m, st), res in results.items()}
    with open(out / "crossval_plot_data.csv", "w") as fh:
        names = list(next(iter(rows.values())))
        fh.write("row," + ",".join(names) + "\n")
        for label, r in rows.items():
            fh.write(label + "," + ",".join(f"{r[n]:.6f}" for n in names) + "\n")
    plotting.fold_metrics_figure(rows, out / "crossval.png")
    _dump(out / "seg_manifest.json", {"experiment": "crossval", "config": _public(values),
                                      "model": model_cfg.to_dict(), "schedule": sched.__dict__,
                                      "inputs": {"real": tree_digest(resolve(values, "real"))}})
    return out


def _checkpoint_source(ckpt_root: Path, real_dir: Path, work: Path, style: StyleConfig | None, seed: int):
    """Callable producing synthetic children for a list of real IDs from stored checkpoints.

    Each real image is generated (and stylized) once into ``work/<realid>`` and reused.
    """
    def produce(ids, per_image):
        samples = []
        for rid in ids:
            d = ckpt_root / rid
            if not (d / "manifest.json").exists():
                raise DatasetError(f"missing checkpoint for {rid} in {ckpt_root}")
            done = work / rid / "final"
            if not (done / "images").is_dir() or len(list((done / "images").iterdir())) < per_image:
                gen = work / rid / "generated"
                export_samples(load_checkpoint(d), gen, per_image, 0, seed)
                if style is not None:
                    stylize_dataset(gen, real_dir, done, style)
                else:
                    shutil.copytree(gen, done, dirs_exist_ok=True)
            samples += load_dataset(done)
        return samples
    return produce


def cmd_seg_smalldata(values: dict) -> Path:
    from . import plotting

    real, out, model_cfg, sched_d = _seg_setup(values)
    sched = SegTrainSchedule.from_dict(dict({"epochs": 100}, **sched_d))
    opts = values.get("smalldata", {})
    check_keys("seg.smalldata", opts, {"synthetic", "checkpoints", "R_values", "ratio", "style_ratio", "style_epochs"})
    seed = int(values.get("seed", 0))
    r_values = list(opts.get("R_values", [5, 10, 15, 20, 25, 30, 35, 40, 45, 50]))
    ratio = int(opts.get("ratio", 10))
    base = Path(values.get("_base", "."))
    folds = make_folds(real, int(values.get("k", 3)), seed)
    if "synthetic" in opts:
        d = Path(opts["synthetic"]) if Path(opts["synthetic"]).is_absolute() else base / opts["synthetic"]
        if not d.exists():
            raise DatasetError(f"dataset not found: {d}")
        source = load_dataset(d)
    elif "checkpoints" in opts:
        ck = Path(opts["checkpoints"]) if Path(opts["checkpoints"]).is_absolute() else base / opts["checkpoints"]
        style = None
        if opts.get("style_ratio", "1:1000") != "none":
            cw, sw = parse_ratio(opts.get("style_ratio", "1:1000"))
            style = StyleConfig(content_weight=cw, style_weight=sw, epochs=int(opts.get("style_epochs", 1000)))
        source = _checkpoint_source(ck, resolve(values, "real"), out / "work", style, seed)
    else:
        raise ConfigError("seg.smalldata needs 'synthetic' or 'checkpoints'")
    rows = small_data_experiment(real, r_values, source, ratio, model_cfg, sched, folds, seed)
    write_small_data_csv(rows, out / "smalldata.csv")
    write_iou_plot_data(rows, out / "smalldata_plot_data.csv")
    (out / "smalldata.md").write_text(small_data_markdown(rows, DESK_NOTE))
    real_rows = [r for r in rows if r.kind == "Real"]
    fake_rows = [r for r in rows if r.kind == "Fake"]
    plotting.iou_comparison_figure([r.r for r in real_rows], [r.metrics.iou for r in real_rows],
                                   [r.metrics.iou for r in fake_rows], out / "smalldata_iou.png")
    _dump(out / "seg_manifest.json", {"experiment": "smalldata", "config": _public(values),
                                      "model": model_cfg.to_dict(), "schedule": sched.__dict__,
                                      "inputs": {"real": tree_digest(resolve(values, "real"))}})
    return out


# -- report --------------------------------------------------------------------------------------

def cmd_report(real: Path, synthetic: list[Path], checkpoints: Path | None, out: Path,
               n: int = 10, bin_size: float = 5.0, seed: int = 0) -> Path:
    from . import plotting

    out.mkdir(parents=True, exist_ok=True)
    groups = {}
    for d in [real, *synthetic]:
        masks_dir = d / "masks"
        if not masks_dir.is_dir():
            raise DatasetError(f"no masks/ directory in {d}")
        masks = [read_mask(p) for p in sorted(masks_dir.iterdir()) if p.is_file()]
        groups[d.name] = [true_pixel_percentage(m) for m in masks]
        with open(out / f"histogram_{d.name}.csv", "w") as fh:
            fh.write("bin_lo,count\n")
            for lo, c in mask_histogram(masks, bin_size):
                fh.write(f"{lo:g},{c}\n")
    plotting.true_pixel_histograms(groups, out / "true_pixel_histograms.png", bin_size)
    if checkpoints is not None:
        rows, lines = [], ["checkpoint,max_std,mean_std,mean_true_pct"]
        real_masks = {s.id: s.mask for s in load_dataset(real)}
        for d in find_checkpoints(checkpoints)[:3]:
            ckpt = load_checkpoint(d)
            masks = [(m >= 0.5).astype(np.float32) for _, m in generate_samples(ckpt, 0, n, seed)]
            mean, std = mask_diversity(masks)
            ref = real_masks.get(ckpt.source_id, masks[0])
            if ref.shape != mean.shape:
                ref = masks[0]
            rows.append((ckpt.source_id, ref, mean, std))
            lines.append(f"{ckpt.source_id},{std.max():.6f},{std.mean():.6f},{100 * mean.mean():.4f}")
        plotting.mask_diversity_figure(rows, out / "mask_diversity.png")
        (out / "mask_diversity.csv").write_text("\n".join(lines) + "\n")
    _dump(out / "report_manifest.json", {
        "n": n, "bin_size": bin_size, "seed": seed,
        "inputs": {d.name: tree_digest(d / "masks") for d in [real, *synthetic]},
        "checkpoints": None if checkpoints is None else
        {p.name: read_manifest(p)["digest"] for p in find_checkpoints(checkpoints)[:3]},
    })
    return out


# -- entry point -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="singan-seg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-gan", help="train one model stack per image")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--ids", help="comma-separated image IDs (default: all)")
    t.add_argument("--epochs", type=int, dest="epochs_per_scale")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--force", action="store_true")

    g = sub.add_parser("generate", help="sample synthetic image/mask pairs from checkpoints")
    g.add_argument("--config")
    g.add_argument("--checkpoints")
    g.add_argument("--n", type=int)
    g.add_argument("--start-scale", type=int, dest="start_scale")
    g.add_argument("--seed", type=int)
    g.add_argument("--threshold", type=float)
    g.add_argument("--out")

    s = sub.add_parser("style-transfer", help="transfer style from each real image to its synthetic children")
    s.add_argument("--config")
    s.add_argument("--gen")
    s.add_argument("--real")
    s.add_argument("--ratio", help="content:style, e.g. 1:1000")
    s.add_argument("--epochs", type=int)
    s.add_argument("--step-size", type=float, dest="step_size")
    s.add_argument("--out")

    m = sub.add_parser("metrics", help="FID / SIFID between a reference and a target dataset")
    m.add_argument("--config")
    m.add_argument("--a", help="reference (real) dataset")
    m.add_argument("--b", help="target dataset or folder of set subdirectories")
    m.add_argument("--metric", choices=None)
    m.add_argument("--sets", type=int)
    m.add_argument("--checkpoints", help="checkpoints used to resample sets from a generation manifest")
    m.add_argument("--out", help="output prefix for .csv/.md/.png/.json")

    e = sub.add_parser("seg", help="segmentation experiments")
    e.add_argument("experiment", choices=["crossval", "smalldata"])
    e.add_argument("--config")
    e.add_argument("--real")
    e.add_argument("--out")

    r = sub.add_parser("report", help="mask statistics and diversity figures")
    r.add_argument("--real", required=True)
    r.add_argument("--synthetic", action="append", default=[])
    r.add_argument("--checkpoints")
    r.add_argument("--n", type=int, default=10)
    r.add_argument("--bin-size", type=float, default=5.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
    )
    cfg = load_config(getattr(args, "config", None))
    if args.command == "train-gan":
        ids = args.ids.split(",") if args.ids else None
        values = merge(cfg["train"], dataset=args.dataset, out=args.out, ids=ids,
                       epochs_per_scale=args.epochs_per_scale, seed=args.seed, workers=args.workers)
        cmd_train_gan(values, force=args.force)
    elif args.command == "generate":
        cmd_generate(merge(cfg["generate"], checkpoints=args.checkpoints, n=args.n, start_scale=args.start_scale,
                           seed=args.seed, threshold=args.threshold, out=args.out))
    elif args.command == "style-transfer":
        cmd_style_transfer(merge(cfg["style"], gen=args.gen, real=args.real, ratio=args.ratio,
                                 epochs=args.epochs, step_size=args.step_size, out=args.out))
    elif args.command == "metrics":
        cmd_metrics(merge(cfg["metrics"], a=args.a, b=args.b, metric=args.metric, sets=args.sets,
                          checkpoints=args.checkpoints, out=args.out))
    elif args.command == "seg":
        values = merge(cfg["seg"], real=args.real, out=args.out)
        (cmd_seg_crossval if args.experiment == "crossval" else cmd_seg_smalldata)(values)
    elif args.command == "report":
        cmd_report(Path(args.real), [Path(s) for s in args.synthetic],
                   Path(args.checkpoints) if args.checkpoints else None, Path(args.out),
                   args.n, args.bin_size, args.seed)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (DatasetError, CheckpointError, PyramidError, LeakageError, FileNotFoundError) as exc:
        log.error("data_error=%r", str(exc))
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as exc:
        log.error("numerical_error=%r", str(exc))
        return EXIT_NUMERIC
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        log.error("config_error=%r", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
