"""Command-line interface: ``fastpoint {gen-data,train,eval,bench,predict}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import colorsys
import contextlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .data import (DatasetFormatError, LabeledDataset, generate_classification_dataset,
                   generate_segmentation_dataset, load_dataset, normalize_unit_sphere, save_dataset,
                   split_indices)
from .models import ClassifierConfig, CloudError, SegmenterConfig, build_model, param_count
from .training import (evaluate_classification, evaluate_segmentation_miou, predict_logits, predict_parts,
                       train)

EXIT_USAGE, EXIT_DATA, EXIT_CKPT = 2, 3, 4
SPLIT_NAMES = ("train", "val", "test")

log = logging.getLogger("fastpoint")


class UsageError(Exception):
    pass


def _splits(text: str) -> tuple:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split fractions {text!r}") from None
    if len(parts) != 3 or min(parts) <= 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"split fractions must be three positive numbers summing to 1, got {text!r}")
    return parts


def _read_dataset(path, task=None) -> LabeledDataset:
    if path is None:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise DatasetFormatError(f"{path}: no such dataset file")
    ds = load_dataset(path)
    if task is not None and ds.task != task:
        raise DatasetFormatError(f"{path} holds a {ds.task!r} dataset but --task is {task!r}")
    return ds


def _read_checkpoint(path) -> ckpt_io.Checkpoint:
    if path is None:
        raise UsageError("--ckpt is required")
    if not Path(path).exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return ckpt_io.load(path)


def _config_for(task: str, n: int, num: int, preset: str):
    try:
        if task == "classify":
            return ClassifierConfig.scaled(num, n)
        return SegmenterConfig.desk(num, n) if preset == "desk" else SegmenterConfig.scaled(num, n)
    except ValueError as e:
        raise UsageError(f"no {task} network fits {n} points per shape: {e}") from None


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    if args.shapes < 1 or args.points < 8:
        raise UsageError("--shapes must be >= 1 and --points >= 8")
    if args.task == "classify":
        ds = generate_classification_dataset(shapes_per_class=args.shapes, points_per_shape=args.points,
                                             seed=args.seed)
    else:
        ds = generate_segmentation_dataset(shapes_per_category=args.shapes, points_per_shape=args.points,
                                           seed=args.seed)
    save_dataset(ds, args.out)
    print(f"task={ds.task}\nshapes={len(ds)}\npoints_per_shape={ds.points_per_shape}\npath={args.out}")
    return 0


def cmd_train(args) -> int:
    if args.ckpt is None:
        raise UsageError("--ckpt is required")
    if args.epochs < 0 or (args.batch_size is not None and args.batch_size < 1):
        raise UsageError("--epochs must be >= 0 and --batch-size >= 1")
    ds = _read_dataset(args.data, args.task)
    batch_size = args.batch_size or (8 if ds.task == "segment" else 32)
    if args.strict_norm:
        off = np.abs(ds.points.astype(np.float64).mean(axis=1)).max() if len(ds) else 0.0
        if off > 1e-3:
            raise CloudError(f"dataset clouds are not normalized (|centroid| up to {off:.3g})")
    resume = args.resume and Path(args.ckpt).exists()
    if resume:
        ck = _read_checkpoint(args.ckpt)
        cfg = ck.config
        splits, split_seed = tuple(ck.meta["splits"]), ck.meta["split_seed"]
        if cfg.task != ds.task or cfg.input_points != ds.points_per_shape:
            raise CheckpointError(f"{args.ckpt} was trained on different data ({cfg.task}, {cfg.input_points} points)")
    else:
        num = ds.num_classes if ds.task == "classify" else ds.num_parts
        cfg = _config_for(ds.task, ds.points_per_shape, num, args.preset)
        splits, split_seed = args.splits, args.seed
    train_idx = split_indices(ds, splits, split_seed)[0]
    if args.epochs > 0 and len(train_idx) < batch_size:
        raise DatasetFormatError(f"{len(train_idx)} training shapes do not fill one batch of {batch_size}")
    log_path = Path(args.log) if args.log else Path(str(args.ckpt) + ".log")
    if not resume and log_path.exists():
        log_path.unlink()
    model = build_model(cfg, seed=args.seed)
    meta = {"splits": list(splits), "split_seed": split_seed}
    history = train(model, ds, args.epochs, batch_size, seed=args.seed, indices=train_idx,
                    ckpt_path=args.ckpt, log_path=log_path, resume=resume, meta=meta)
    for entry in history:
        print(entry.line())
    print(f"checkpoint={args.ckpt}\nlog={log_path}")
    return 0


def cmd_eval(args) -> int:
    ck = _read_checkpoint(args.ckpt)
    ds = _read_dataset(args.data, args.task)
    cfg = ck.config
    if cfg.task != ds.task or cfg.input_points != ds.points_per_shape:
        raise CheckpointError(f"checkpoint expects {cfg.task} data with {cfg.input_points} points")
    model = ckpt_io.restore(ck)
    splits = tuple(ck.meta.get("splits", (0.7, 0.15, 0.15)))
    idx = split_indices(ds, splits, ck.meta.get("split_seed", 0))[SPLIT_NAMES.index(args.split)]
    if ds.task == "classify":
        report = evaluate_classification(model, ds, idx)
    else:
        report = evaluate_segmentation_miou(model, ds, idx)
    print(f"task={ds.task}\nsplit={args.split}\nepoch={ck.epoch}")
    print("\n".join(report.lines()))
    return 0


def cmd_bench(args) -> int:
    if args.runs < 1 or args.warmup < 0:
        raise UsageError("--runs must be >= 1 and --warmup >= 0")
    if args.ckpt is not None:
        model = ckpt_io.restore(_read_checkpoint(args.ckpt))
    else:
        num = args.classes or (40 if args.task == "classify" else 50)
        points = args.points or (1024 if args.task == "classify" else 2048)
        model = build_model(_config_for(args.task, points, num, args.preset), seed=args.seed)
    cfg = model.config
    rng = np.random.default_rng(args.seed)
    cloud = normalize_unit_sphere(rng.normal(size=(cfg.input_points, 3))).astype(np.float32)[None]
    for _ in range(args.warmup):
        model(cloud)
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        model(cloud)
        times.append((time.perf_counter() - t0) * 1e3)
    count = param_count(cfg)
    print(f"task={cfg.task}")
    print(f"param_count={count}")
    print(f"model_size_mb={count * 4 / 2 ** 20:.4f}")
    print(f"forward_ms_mean={np.mean(times):.3f}")
    print(f"forward_ms_std={np.std(times):.3f}")
    print(f"warmup={args.warmup}\nruns={args.runs}\nbatch_size=1")
    return 0


def part_colors(n: int) -> list[tuple[int, int, int]]:
    """``n`` distinct RGB colours, well spread in hue."""
    colors, seen, i = [], set(), 0
    while len(colors) < n:
        hue = (i * 0.618033988749895) % 1.0
        val = (1.0, 0.75, 0.55)[(i // 7) % 3]
        rgb = tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, 0.85, val))
        i += 1
        if rgb in seen or rgb == (255, 0, 0):
            continue
        seen.add(rgb)
        colors.append(rgb)
    return colors


def write_ply(path, xyz, colors, extra_name: str, extra) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(xyz)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             f"property int {extra_name}", "end_header"]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {int(e)}"
              for p, c, e in zip(xyz, colors, extra)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_cloud(path, index: int):
    """A single cloud plus its ground truth and category (None for plain text)."""
    raw = Path(path).read_bytes()
    if raw.startswith(b"FPNN-DATA-1"):
        ds = _read_dataset(path, "segment")
        if not 0 <= index < len(ds):
            raise UsageError(f"--index {index} out of range for {len(ds)} shapes")
        return ds.points[index], ds.labels[index].astype(np.int64), ds.categories()[index], ds.category_parts
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: not a dataset file or whitespace-separated xyz text ({e})") from None
    if pts.shape[1] < 3:
        raise DatasetFormatError(f"{path}: expected at least 3 columns, got {pts.shape[1]}")
    return pts[:, :3], None, None, None


def cmd_predict(args) -> int:
    if args.out is None or args.data is None:
        raise UsageError("--data and --out are required")
    ck = _read_checkpoint(args.ckpt)
    if ck.config.task != "segment":
        raise CheckpointError("predict needs a segmentation checkpoint")
    if not Path(args.data).exists():
        raise DatasetFormatError(f"{args.data}: no such file")
    xyz, gt, cat, cat_parts = _read_cloud(args.data, args.index)
    if args.diff is not None and gt is None:
        raise UsageError("--diff needs ground truth; pass a segmentation dataset file")
    if len(xyz) != ck.config.input_points:
        raise CloudError(f"cloud has {len(xyz)} points, model expects {ck.config.input_points}")
    model = ckpt_io.restore(ck)
    cloud = normalize_unit_sphere(xyz).astype(np.float32)[None]
    if gt is not None:
        pred = predict_parts(model, cloud, [cat], cat_parts)[0]
    else:
        pred = predict_logits(model, cloud)[0].argmax(axis=-1)
    palette = part_colors(ck.config.num_parts)
    write_ply(args.out, xyz, [palette[p] for p in pred], "label", pred)
    print(f"points={len(xyz)}\nout={args.out}")
    if args.diff is not None:
        wrong = pred != gt
        colors = [(255, 0, 0) if w else (180, 180, 180) for w in wrong]
        write_ply(args.diff, xyz, colors, "wrong", wrong)
        print(f"mispredicted={int(wrong.sum())}\ndiff={args.diff}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastpoint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, task_required=False):
        p.add_argument("--task", choices=("classify", "segment"), required=task_required)
        p.add_argument("--data")
        p.add_argument("--ckpt")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, task_required=True)
    p.add_argument("--shapes", type=int, default=None, help="shapes per class / category")
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints plus a log")
    common(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--splits", type=_splits, default=(0.7, 0.15, 0.15))
    p.add_argument("--strict-norm", action="store_true")
    p.add_argument("--preset", choices=("full", "desk"), default="full")
    p.add_argument("--log")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print evaluation metrics as key=value lines")
    common(p)
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="report model size and forward time")
    common(p)
    p.add_argument("--points", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--preset", choices=("full", "desk"), default="full")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("predict", help="write per-point part predictions as a PLY file")
    common(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--diff", help="optional PLY marking mispredicted points in red")
    p.set_defaults(func=cmd_predict)
    return parser


def _thread_limit():
    value = os.environ.get("FASTPOINT_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "gen-data":
        args.shapes = args.shapes or (200 if args.task == "classify" else 100)
        args.points = args.points or (1024 if args.task == "classify" else 2048)
    if args.command == "bench" and args.task is None and args.ckpt is None:
        args.task = "classify"
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"fastpoint: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CloudError) as e:
        print(f"fastpoint: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"fastpoint: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CKPT


if __name__ == "__main__":
    sys.exit(main())
