"""Command-line entry point: dataset / train / eval / detect / bench.

Settings resolve as: built-in defaults < ``--config`` file < explicit flags.
The config file is flat ``key = value`` text with ``#`` comments; keys are the
long flag names without dashes (``lr``, ``batch``, ``preset`` ...).

Exit codes: 0 success, 1 usage or I/O error, 2 validation findings,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import base64
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checkpoint import CheckpointError, load_model, save_model
from .dataset import (
    AnnotatedImage,
    apply_manifest,
    generate_synthetic,
    load_dataset,
    read_manifest,
    split,
    write_dataset,
    write_manifest,
    write_rejections,
)
from .detector import PRESETS, ModelConfig, build_model, param_count
from .imageio import ImageReadError, encode_png, read_ppm
from .inference import (
    EVAL_CONFIG,
    InferenceConfig,
    SequenceResult,
    TimingSummary,
    detect_image,
    evaluate_model,
    write_detections_csv,
)
from .metrics import compare_models, emit_curves
from .training import DivergenceError, LossConfig, OptimizerConfig, train

log = logging.getLogger("fireyolo")

EXIT_OK, EXIT_USAGE, EXIT_FINDINGS, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def echo_config(args: argparse.Namespace, path: Path) -> None:
    skip = {"func", "config_values"}
    lines = [f"{k} = {_echo_value(v)}" for k, v in sorted(vars(args).items()) if k not in skip]
    path.write_text("\n".join(lines) + "\n")


def _echo_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return "" if v is None else str(v)


# --------------------------------------------------------------------------
# shared helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dirs(args) -> tuple:
    if args.data:
        root = Path(args.data)
        return root / "images", root / "labels"
    if args.images and args.labels:
        return Path(args.images), Path(args.labels)
    raise UsageError("give --data DIR (with images/ and labels/) or both --images and --labels")


def _load(args) -> tuple:
    images_dir, labels_dir = _data_dirs(args)
    for d in (images_dir, labels_dir):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    return load_dataset(images_dir, labels_dir)


def _dataset_split(args):
    """Train/val split from --synthetic or --data (optionally pinned by --split)."""
    if args.synthetic:
        if args.size is None:
            raise UsageError("--synthetic needs --size")
        images = generate_synthetic(args.synthetic, args.size, args.seed)
        return split(images, args.ratio, args.seed)
    images, rejections = _load(args)
    if rejections:
        log.warning("%d images rejected while loading (run 'dataset validate' for the report)", len(rejections))
    if not images:
        raise UsageError("no annotated images found")
    if args.split:
        return apply_manifest(images, read_manifest(args.split), args.seed, args.ratio)
    return split(images, args.ratio, args.seed)


def _model_config(args) -> ModelConfig:
    depth, width = PRESETS[args.preset]
    return ModelConfig(
        depth_multiple=args.depth if args.depth is not None else depth,
        width_multiple=args.width if args.width is not None else width,
        num_classes=args.classes,
        input_size=args.size,
        leaky_slope=args.leaky_slope,
    )


def _load_checkpoint(path, args=None):
    try:
        model = load_model(path)
    except (OSError, CheckpointError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    if args is not None:
        if getattr(args, "size", None) is not None and args.size != model.config.input_size:
            raise UsageError(f"input_size mismatch: checkpoint {path} expects {model.config.input_size}, "
                             f"got --size {args.size}")
        if getattr(args, "classes", None) is not None and args.classes != model.config.num_classes:
            raise UsageError(f"num_classes mismatch: checkpoint {path} has {model.config.num_classes}, "
                             f"got --classes {args.classes}")
    return model


def _inference_config(args) -> InferenceConfig:
    return InferenceConfig(args.conf, args.iou, args.max_det)


# --------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    out = _out_dir(args)
    if args.action == "synth":
        images = generate_synthetic(args.count, args.size, args.seed)
        write_dataset(images, out)
        print(f"wrote {len(images)} synthetic images to {out}")
        return EXIT_OK
    images, rejections = _load(args)
    if args.action == "validate":
        write_rejections(out / "rejections.csv", rejections)
        print(f"{len(images)} loaded, {len(rejections)} rejected (report: {out / 'rejections.csv'})")
        return EXIT_FINDINGS if rejections else EXIT_OK
    if not images:
        raise UsageError("no annotated images to split")
    ds = split(images, args.ratio, args.seed)
    write_manifest(out / "split.txt", ds)
    print(f"train {len(ds.train)} / val {len(ds.val)} (manifest: {out / 'split.txt'})")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    ds = _dataset_split(args)
    config = _model_config(args)
    model = build_model(config, args.seed)
    batch = args.batch
    if batch > len(ds.train):
        log.warning("batch size %d exceeds %d training images; using %d", batch, len(ds.train), len(ds.train))
        batch = len(ds.train)
    opt = OptimizerConfig(args.lr, args.epochs, batch, args.schedule)
    loss = LossConfig(pos_weight=args.pos_weight, reduction=args.reduction, lambda_obj=args.lambda_obj,
                      lambda_cls=args.lambda_cls, lambda_box=args.lambda_box,
                      anchor_ratio_threshold=args.anchor_t)
    log.info("model %s: %d parameters; train %d / val %d images", args.preset, param_count(model),
             len(ds.train), len(ds.val))
    write_manifest(out / "split.txt", ds)
    try:
        history = train(model, ds.train, ds.val, opt, loss, args.seed, out)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    last = history.records[-1]
    print(f"trained {len(history.records)} epochs; best mAP@0.5 {history.best_map50:.4f} at epoch "
          f"{history.best_epoch}; last loss {last.loss_total:.4f}")
    return EXIT_OK


def _eval_images(args) -> list:
    ds = _dataset_split(args)
    return ds.train if args.subset == "train" else ds.val


def _evaluate_checkpoint(path, images, args, out: Path):
    model = _load_checkpoint(path, args)
    bad = sorted({lab.class_id for im in images for lab in im.labels if lab.class_id >= model.config.num_classes})
    if bad:
        raise UsageError(f"num_classes mismatch: dataset uses class {bad[0]} but checkpoint {path} "
                         f"has {model.config.num_classes} classes")
    report = evaluate_model(model, images, EVAL_CONFIG, model_id=Path(path).stem,
                            model_size_bytes=Path(path).stat().st_size)
    emit_curves(report, out)
    (out / "report.txt").write_text(report.summary() + "\n")
    return report


def cmd_eval(args) -> int:
    out = _out_dir(args)
    checkpoints = list(args.compare or []) or ([args.checkpoint] if args.checkpoint else [])
    if not checkpoints:
        raise UsageError("give --checkpoint PATH or --compare A B ...")
    images = _eval_images(args)
    if not images:
        raise UsageError("evaluation set is empty")
    reports = []
    for i, path in enumerate(checkpoints):
        target = out if len(checkpoints) == 1 else out / f"{i}_{Path(path).stem}"
        target.mkdir(parents=True, exist_ok=True)
        report = _evaluate_checkpoint(path, images, args, target)
        reports.append(report)
        print(report.summary())
    if len(reports) > 1 or args.compare:
        table = compare_models(reports)
        (out / "comparison.csv").write_text(table.to_csv())
        (out / "comparison.txt").write_text(table.to_text() + "\n")
        print(table.to_text())
    return EXIT_OK


def render_overlay(pixels, detections, title: str = "") -> str:
    h, w = pixels.shape[:2]
    data = base64.b64encode(encode_png(pixels)).decode("ascii")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f"<title>{title}</title>" if title else "",
        f'<image x="0" y="0" width="{w}" height="{h}" href="data:image/png;base64,{data}"/>',
    ]
    for d in detections:
        x1, y1, x2, y2 = d.box
        parts.append(f'<rect x="{x1:.1f}" y="{y1:.1f}" width="{x2 - x1:.1f}" height="{y2 - y1:.1f}" '
                     f'fill="none" stroke="#00ff00" stroke-width="2"/>')
        parts.append(f'<text x="{x1 + 2:.1f}" y="{max(y1 - 3, 10):.1f}" fill="#00ff00" font-family="sans-serif" '
                     f'font-size="11">{d.class_id} {d.confidence:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(p for p in parts if p) + "\n"


def _run_frames(model, frames, config, overlay_dir: Optional[Path]) -> SequenceResult:
    """frames: iterable of (name, pixels-or-exception)."""
    result = SequenceResult([], [])
    for name, pixels in frames:
        if isinstance(pixels, Exception):
            result.errors.append((name, str(pixels)))
            continue
        dets, latency = detect_image(model, pixels, config)
        result.frames.append((name, dets))
        result.latencies.append(latency)
        if overlay_dir is not None:
            (overlay_dir / f"{Path(name).stem}.svg").write_text(render_overlay(pixels, dets, name))
    return result


def _read_frames(source: Path):
    paths = [source] if source.is_file() else sorted(p for p in source.iterdir() if p.is_file())
    for p in paths:
        try:
            yield p.name, read_ppm(p)
        except ImageReadError as exc:
            yield p.name, exc


def cmd_detect(args) -> int:
    out = _out_dir(args)
    source = Path(args.source)
    if not source.exists():
        raise UsageError(f"source not found: {source}")
    model = _load_checkpoint(args.checkpoint)
    overlay_dir = None
    if args.overlay:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
    result = _run_frames(model, _read_frames(source), _inference_config(args), overlay_dir)
    for name, reason in result.errors:
        print(f"warning: skipped {name}: {reason}", file=sys.stderr)
    if not result.frames:
        print("error: no readable frames", file=sys.stderr)
        return EXIT_USAGE
    write_detections_csv(out / "detections.csv", result.frames)
    summary = result.summary
    (out / "timing.csv").write_text(summary.to_csv())
    n_det = sum(len(d) for _, d in result.frames)
    print(f"{summary.frames} frames, {n_det} detections, mean {summary.mean_s:.4f}s/frame, {summary.fps:.2f} fps")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _out_dir(args)
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
    else:
        log.warning("no --checkpoint given; timing an untrained preset-%s model", args.preset)
        model = build_model(_model_config(args), args.seed)
    frames = [(f"frame_{i:05d}", im.pixels) for i, im in enumerate(generate_synthetic(args.frames, args.size, args.seed))]
    result = _run_frames(model, frames, _inference_config(args), None)
    summary: TimingSummary = result.summary
    (out / "timing.csv").write_text(summary.to_csv())
    write_detections_csv(out / "detections.csv", result.frames)
    print(f"frames={summary.frames} total_s={summary.total_s:.4f} mean_s={summary.mean_s:.4f} "
          f"median_s={summary.median_s:.4f} max_s={summary.max_s:.4f} fps={summary.fps:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    return p


def _data_flags(p, with_synth=True):
    p.add_argument("--data", help="dataset root holding images/ and labels/")
    p.add_argument("--images", help="image directory (instead of --data)")
    p.add_argument("--labels", help="label directory (instead of --data)")
    if with_synth:
        p.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate N synthetic images instead")
        p.add_argument("--split", help="split manifest to reuse")
    p.add_argument("--ratio", type=float, default=0.5, help="training fraction (default 0.5)")


def _model_flags(p, size_default=416, classes_default=1):
    p.add_argument("--preset", choices=sorted(PRESETS), default="n")
    p.add_argument("--depth", type=float, help="override depth multiple")
    p.add_argument("--width", type=float, help="override width multiple")
    p.add_argument("--size", type=int, default=size_default, help="model input size")
    p.add_argument("--classes", type=int, default=classes_default)
    p.add_argument("--names", default="fire", help="comma-separated class names")
    p.add_argument("--leaky-slope", type=float, default=0.1)


def _infer_flags(p, conf=0.25):
    p.add_argument("--conf", type=float, default=conf)
    p.add_argument("--iou", type=float, default=0.45)
    p.add_argument("--max-det", type=int, default=300)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fireyolo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="validate, split or synthesize datasets")
    p.add_argument("action", choices=["validate", "split", "synth"])
    _data_flags(p, with_synth=False)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=416)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--schedule", choices=["constant", "linear"], default="constant")
    p.add_argument("--pos-weight", type=float, default=1.0)
    p.add_argument("--reduction", choices=["mean", "sum"], default="mean")
    p.add_argument("--lambda-obj", type=float, default=1.0)
    p.add_argument("--lambda-cls", type=float, default=0.5)
    p.add_argument("--lambda-box", type=float, default=0.05)
    p.add_argument("--anchor-t", type=float, default=4.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("--checkpoint")
    p.add_argument("--compare", nargs="+", metavar="CKPT")
    _data_flags(p)
    p.add_argument("--subset", choices=["train", "val"], default="val")
    p.add_argument("--size", type=int, default=None, help="expected model input size (checked)")
    p.add_argument("--classes", type=int, default=None, help="expected class count (checked)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="detect fire in an image or frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="PPM image or directory of frames")
    p.add_argument("--overlay", action="store_true", help="write SVG overlays per frame")
    _infer_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", parents=[common], help="time inference on synthetic frames")
    p.add_argument("--checkpoint")
    p.add_argument("--frames", type=int, default=20)
    _model_flags(p)
    _infer_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"{args.config}: unknown settings {', '.join(unknown)}")
        for key, value in values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                values[key] = _bool(value)
            elif action.nargs in ("+", "*"):
                values[key] = value.split()
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        out = _out_dir(args)
        echo_config(args, out / f"{args.command}.resolved.txt")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
