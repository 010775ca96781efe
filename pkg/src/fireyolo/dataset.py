"""YOLO-format ingestion, stretch resize, splitting, batching and synthetic fire data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .imageio import ImageReadError, read_ppm, write_ppm
from .tensor import Tensor

# labels this far outside [0, 1] are clamped, anything further is rejected
CLAMP_TOLERANCE = 1e-3
FRAME_TOLERANCE = 1e-6
IMAGE_SUFFIXES = (".ppm",)


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise LabelError(f"class id must be a non-negative integer, got {self.class_id}")
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise LabelError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise LabelError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        tol = FRAME_TOLERANCE
        if (self.cx - self.w / 2 < -tol or self.cx + self.w / 2 > 1 + tol
                or self.cy - self.h / 2 < -tol or self.cy + self.h / 2 > 1 + tol):
            raise LabelError(f"box {self.as_tuple()} extends outside the frame")

    def as_tuple(self) -> tuple:
        return (self.class_id, self.cx, self.cy, self.w, self.h)

    def corners(self, width: float, height: float) -> tuple:
        return ((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    labels: tuple
    source_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be H x W x 3 uint8, got {self.pixels.shape} {self.pixels.dtype}")
        self.labels = tuple(self.labels)
        if not self.labels:
            raise LabelError(f"{self.source_id}: an annotated image needs at least one label")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Rejection:
    filename: str
    reason: str


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int
    ratio: float


# --------------------------------------------------------------------------
# labels


def _clamp_unit(v: float, what: str) -> float:
    if v < -CLAMP_TOLERANCE or v > 1 + CLAMP_TOLERANCE:
        raise LabelError(f"{what}={v} outside [0, 1]")
    return min(max(v, 0.0), 1.0)


def parse_label_line(line: str) -> BoxLabel:
    parts = line.split()
    if len(parts) != 5:
        raise LabelError(f"expected 5 fields 'class cx cy w h', got {len(parts)}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise LabelError(f"unparseable number: {exc}") from exc
    if not all(map(math.isfinite, (cx, cy, w, h))):
        raise LabelError("non-finite coordinate")
    cx, cy = _clamp_unit(cx, "cx"), _clamp_unit(cy, "cy")
    w, h = _clamp_unit(w, "w"), _clamp_unit(h, "h")
    if w == 0 or h == 0:
        raise LabelError("zero-size box")
    # trim edges that poke marginally past the frame
    x1, x2 = cx - w / 2, cx + w / 2
    y1, y2 = cy - h / 2, cy + h / 2
    for edge, name in ((-x1, "left"), (x2 - 1, "right"), (-y1, "top"), (y2 - 1, "bottom")):
        if edge > CLAMP_TOLERANCE:
            raise LabelError(f"box {name} edge outside the frame by {edge:.4g}")
    if x1 < 0 or x2 > 1 or y1 < 0 or y2 > 1:
        x1, x2 = max(x1, 0.0), min(x2, 1.0)
        y1, y2 = max(y1, 0.0), min(y2, 1.0)
        cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
    return BoxLabel(cls, cx, cy, w, h)


def read_labels(path) -> list:
    """Parse a label file. Raises LabelError naming the first bad line."""
    labels = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                labels.append(parse_label_line(line))
            except LabelError as exc:
                raise LabelError(f"line {lineno}: {exc}") from None
    return labels


def write_labels(path, labels: Sequence[BoxLabel]) -> None:
    Path(path).write_text("".join(lab.to_line() + "\n" for lab in labels), encoding="ascii")


# --------------------------------------------------------------------------
# ingestion


def load_dataset(image_dir, label_dir) -> tuple:
    """Load every image that has a valid, non-empty label file.

    Returns ``(images, rejections)``; images come back in filename order and
    every scanned file ends up in exactly one of the two lists.
    """
    image_dir, label_dir = Path(image_dir), Path(label_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory {image_dir} does not exist")
    if not label_dir.is_dir():
        raise FileNotFoundError(f"label directory {label_dir} does not exist")
    images, rejections = [], []
    for path in sorted(p for p in image_dir.iterdir() if p.is_file()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            rejections.append(Rejection(path.name, f"unsupported image format {path.suffix or '(none)'}"))
            continue
        label_path = label_dir / (path.stem + ".txt")
        if not label_path.exists():
            rejections.append(Rejection(path.name, "missing label file"))
            continue
        try:
            labels = read_labels(label_path)
        except (LabelError, UnicodeDecodeError) as exc:
            rejections.append(Rejection(path.name, f"malformed label: {exc}"))
            continue
        if not labels:
            rejections.append(Rejection(path.name, "empty label file"))
            continue
        try:
            pixels = read_ppm(path)
        except ImageReadError as exc:
            rejections.append(Rejection(path.name, f"unreadable image: {exc}"))
            continue
        images.append(AnnotatedImage(pixels, labels, path.stem))
    return images, rejections


def write_rejections(path, rejections: Sequence[Rejection]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "reason"])
        for r in rejections:
            writer.writerow([r.filename, r.reason])


def write_dataset(images: Sequence[AnnotatedImage], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for img in images:
        write_ppm(root / "images" / f"{img.source_id}.ppm", img.pixels)
        write_labels(root / "labels" / f"{img.source_id}.txt", img.labels)


# --------------------------------------------------------------------------
# preprocessing


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of H x W x C uint8 pixels."""
    h, w = pixels.shape[:2]

    def axis(n_in, n_out):
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    src = pixels.astype(np.float64)
    rows = src[y0] * (1 - wy)[:, None, None] + src[y1] * wy[:, None, None]
    out = rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def stretch_resize(image: AnnotatedImage, target: int) -> AnnotatedImage:
    """Resample to target x target ignoring aspect ratio; normalized labels carry over."""
    if target <= 0 or target % 2:
        raise ValueError(f"stretch target must be a positive even integer, got {target}")
    return AnnotatedImage(bilinear_resize(image.pixels, target, target), image.labels, image.source_id)


def split(items: Sequence, ratio: float = 0.5, seed: int = 0) -> DatasetSplit:
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(items) == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(math.floor(ratio * len(items) + 0.5))
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:]]
    return DatasetSplit(train, val, seed, ratio)


def write_manifest(path, ds: DatasetSplit) -> None:
    lines = [f"train {img.source_id}" for img in ds.train] + [f"val {img.source_id}" for img in ds.val]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    subsets = {"train": [], "val": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        kind, _, name = line.partition(" ")
        if kind not in subsets or not name:
            raise ValueError(f"{path}: line {lineno}: expected 'train <file>' or 'val <file>'")
        subsets[kind].append(name.strip())
    return subsets


def apply_manifest(images: Sequence[AnnotatedImage], manifest: dict, seed: int = 0, ratio: float = 0.5) -> DatasetSplit:
    by_id = {img.source_id: img for img in images}
    missing = [n for n in manifest["train"] + manifest["val"] if n not in by_id]
    if missing:
        raise KeyError(f"manifest names {len(missing)} unknown images, e.g. {missing[0]}")
    return DatasetSplit([by_id[n] for n in manifest["train"]], [by_id[n] for n in manifest["val"]], seed, ratio)


@dataclass
class Batch:
    images: Tensor
    labels: list
    source_ids: list = field(default_factory=list)


def to_array(images: Sequence[AnnotatedImage]) -> np.ndarray:
    """N x 3 x H x W float32 in [0, 1]."""
    stack = np.stack([img.pixels for img in images])
    return (stack.transpose(0, 3, 1, 2).astype(np.float32) / np.float32(255.0))


def make_batches(images: Sequence[AnnotatedImage], batch_size: int, epoch_seed: Optional[int] = 0) -> Iterator[Batch]:
    """Shuffle with ``epoch_seed`` (None keeps input order) and yield batches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(images)) if epoch_seed is None else np.random.default_rng(epoch_seed).permutation(len(images))
    for start in range(0, len(images), batch_size):
        chunk = [images[i] for i in order[start:start + batch_size]]
        yield Batch(Tensor(to_array(chunk)), [list(img.labels) for img in chunk], [img.source_id for img in chunk])


# --------------------------------------------------------------------------
# synthetic fire blobs


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(0, 1, (cells, cells, 1)) * 255
    return bilinear_resize(coarse.astype(np.uint8), size, size)[..., 0].astype(np.float64) / 255


def synthetic_background(image_size: int, rng: np.random.Generator) -> np.ndarray:
    """Dark textured background, H x W x 3 float64 in [0, 255]."""
    base = rng.uniform(12, 55, 3)
    texture = _smooth_noise(rng, image_size, 6) - 0.5
    img = base[None, None, :] + 30 * texture[..., None] + rng.normal(0, 4, (image_size, image_size, 3))
    return np.clip(img, 0, 255)


def _paint_blob(img: np.ndarray, rng: np.random.Generator, cx: float, cy: float, rx: float, ry: float):
    """Composite one radial-gradient blob; returns its pixel mask (alpha >= 0.5)."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = (xx + 0.5 - cx) / rx, (yy + 0.5 - cy) / ry
    theta = np.arctan2(dy, dx)
    edge = np.ones_like(theta)
    for k in range(2, 6):
        edge += rng.uniform(0, 0.07) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    d = np.hypot(dx, dy) / edge + rng.normal(0, 0.04, theta.shape)
    alpha = np.clip((1.0 - d) / 0.15, 0, 1)
    heat = np.clip(1.0 - d, 0, 1) ** 0.7
    core = np.array([255.0, 235.0, 130.0])
    rim = np.array([225.0, rng.uniform(50, 110), rng.uniform(0, 30)])
    color = rim[None, None, :] + (core - rim)[None, None, :] * heat[..., None]
    img[...] = img * (1 - alpha[..., None]) + color * alpha[..., None]
    return alpha >= 0.5


def generate_synthetic(count: int, image_size: int = 416, seed: int = 0,
                       size_range: tuple = (0.05, 0.40)) -> list:
    """Deterministic dark scenes with 1-3 orange fire blobs each, labelled class 0."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    lo, hi = size_range
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        img = synthetic_background(image_size, rng)
        placed, labels = [], []
        for _ in range(int(rng.integers(1, 4))):
            for _attempt in range(50):
                bw = rng.uniform(lo, hi) * image_size
                bh = float(np.clip(bw * rng.uniform(0.7, 1.4), lo * image_size, hi * image_size))
                cx = rng.uniform(bw / 2 + 1, image_size - bw / 2 - 1)
                cy = rng.uniform(bh / 2 + 1, image_size - bh / 2 - 1)
                box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
                if all(box[2] + 2 < b[0] or b[2] + 2 < box[0] or box[3] + 2 < b[1] or b[3] + 2 < box[1]
                       for b in placed):
                    break
            else:
                continue
            mask = _paint_blob(img, rng, cx, cy, bw / 2, bh / 2)
            ys, xs = np.nonzero(mask)
            if len(xs) == 0:
                continue
            placed.append(box)
            x1, x2, y1, y2 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            labels.append(BoxLabel(0, (x1 + x2) / 2 / image_size, (y1 + y2) / 2 / image_size,
                                   (x2 - x1) / image_size, (y2 - y1) / image_size))
        if not labels:
            raise RuntimeError("synthetic generator failed to place a blob")  # unreachable for sane sizes
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.append(AnnotatedImage(pixels, labels, f"synth_{seed}_{i:05d}"))
    return out


def generate_negatives(count: int, image_size: int = 416, seed: int = 0) -> list:
    """Background-only frames (H x W x 3 uint8) with no fire content."""
    frames = []
    for child in np.random.SeedSequence([seed, 1]).spawn(count):
        rng = np.random.default_rng(child)
        frames.append(np.clip(np.rint(synthetic_background(image_size, rng)), 0, 255).astype(np.uint8))
    return frames
