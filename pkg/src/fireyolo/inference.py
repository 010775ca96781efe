"""Decoding raw head maps, NMS, and timed detection over images and frame folders."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Detection, GroundTruth, iou_matrix
from .dataset import AnnotatedImage, bilinear_resize
from .imageio import ImageReadError, read_ppm
from .metrics import EvaluationReport, evaluate
from .tensor import Tensor, sigmoid_array


@dataclass
class InferenceConfig:
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    max_detections: int = 300

    def __post_init__(self):
        for name in ("conf_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_detections < 1:
            raise ValueError(f"max_detections must be >= 1, got {self.max_detections}")


# settings used when scoring a model: keep nearly everything for the sweep
EVAL_CONFIG = InferenceConfig(conf_threshold=0.001, nms_iou_threshold=0.6, max_detections=300)


def _raw(m) -> np.ndarray:
    return m.data if isinstance(m, Tensor) else np.asarray(m)


def decode_arrays(raw_maps, anchors, strides) -> list:
    """All candidates per image as (boxes (k, 4), confidence (k,), class (k,)), in map order."""
    if len(raw_maps) != len(strides) or len(anchors) != len(strides):
        raise ValueError(f"got {len(raw_maps)} maps, {len(anchors)} anchor sets, {len(strides)} strides")
    per_scale = []
    for raw, anc, stride in zip(raw_maps, anchors, strides):
        raw = _raw(raw).astype(np.float64)
        n, ch, h, w = raw.shape
        na = len(anc)
        if ch % na:
            raise ValueError(f"map with {ch} channels does not split over {na} anchors")
        no = ch // na
        p = sigmoid_array(raw.reshape(n, na, no, h, w))
        anc = np.asarray(anc, dtype=np.float64).reshape(1, na, 2, 1, 1)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (2 * p[:, :, 0] - 0.5 + gx) * stride
        cy = (2 * p[:, :, 1] - 0.5 + gy) * stride
        bw = (2 * p[:, :, 2]) ** 2 * anc[:, :, 0]
        bh = (2 * p[:, :, 3]) ** 2 * anc[:, :, 1]
        cls_prob = p[:, :, 5:]
        cls = cls_prob.argmax(axis=2)
        conf = p[:, :, 4] * cls_prob.max(axis=2)
        boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)
        per_scale.append((boxes.reshape(n, -1, 4), conf.reshape(n, -1), cls.reshape(n, -1)))
    return [
        tuple(np.concatenate([s[k][i] for s in per_scale]) for k in range(3))
        for i in range(per_scale[0][0].shape[0])
    ]


def decode(raw_maps, anchors, strides, conf_threshold: float = 0.25) -> list:
    """Detections with confidence >= threshold, one list per batch item."""
    out = []
    for boxes, conf, cls in decode_arrays(raw_maps, anchors, strides):
        keep = np.nonzero(conf >= conf_threshold)[0]
        out.append([Detection(int(cls[i]), float(conf[i]), tuple(float(v) for v in boxes[i])) for i in keep])
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float, max_detections: int) -> np.ndarray:
    """Per-class greedy NMS; returns kept indices in ranking order."""
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    alive = np.ones(len(order), dtype=bool)
    keep = []
    b = boxes[order]
    c = classes[order]
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        if len(keep) >= max_detections:
            break
        rest = np.arange(pos + 1, len(order))
        rest = rest[alive[rest] & (c[rest] == c[pos])]
        if len(rest):
            ious = iou_matrix(b[pos:pos + 1], b[rest])[0]
            alive[rest[ious >= iou_threshold]] = False
    return np.array(keep, dtype=np.int64)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.45, max_detections: int = 300) -> list:
    if not detections:
        return []
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    scores = np.array([d.confidence for d in detections], dtype=np.float64)
    classes = np.array([d.class_id for d in detections], dtype=np.int64)
    return [detections[i] for i in nms_indices(boxes, scores, classes, iou_threshold, max_detections)]


def postprocess(raw_maps, model_config, config: InferenceConfig, scales: Optional[Sequence[tuple]] = None) -> list:
    """Decode + threshold + NMS per image; optionally map boxes back by (sx, sy, width, height)."""
    results = []
    for i, (boxes, conf, cls) in enumerate(decode_arrays(raw_maps, model_config.anchors, model_config.strides)):
        keep = conf >= config.conf_threshold
        boxes, conf, cls = boxes[keep], conf[keep], cls[keep]
        idx = nms_indices(boxes, conf, cls, config.nms_iou_threshold, config.max_detections)
        boxes, conf, cls = boxes[idx], conf[idx], cls[idx]
        if scales is not None:
            sx, sy, width, height = scales[i]
            boxes = boxes * np.array([sx, sy, sx, sy])
            boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
            boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
            ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            boxes, conf, cls = boxes[ok], conf[ok], cls[ok]
        results.append([Detection(int(k), float(s), tuple(float(v) for v in b)) for b, s, k in zip(boxes, conf, cls)])
    return results


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, AnnotatedImage) else np.asarray(image, dtype=np.uint8)


def _prepare(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[:2] != (size, size):
        pixels = bilinear_resize(pixels, size, size)
    return pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def detect_image(model, image, config: InferenceConfig = InferenceConfig()) -> tuple:
    """Stretch to the model size, run forward/decode/NMS, map boxes back to the original frame.

    Returns ``(detections, latency_seconds)``; latency covers forward, decode and NMS.
    """
    pixels = _pixels(image)
    h, w = pixels.shape[:2]
    s = model.config.input_size
    x = Tensor(_prepare(pixels, s)[None])
    start = time.perf_counter()
    maps = model.forward(x, "eval")
    dets = postprocess(maps, model.config, config, [(w / s, h / s, w, h)])[0]
    return dets, time.perf_counter() - start


def detect_images(model, images: Sequence, config: InferenceConfig = EVAL_CONFIG, batch_size: int = 16) -> list:
    """Batched eval-mode detection, boxes in each image's own pixel frame."""
    s = model.config.input_size
    out = []
    for start in range(0, len(images), batch_size):
        chunk = [_pixels(im) for im in images[start:start + batch_size]]
        x = Tensor(np.stack([_prepare(p, s) for p in chunk]))
        scales = [(p.shape[1] / s, p.shape[0] / s, p.shape[1], p.shape[0]) for p in chunk]
        out.extend(postprocess(model.forward(x, "eval"), model.config, config, scales))
    return out


def ground_truths(image: AnnotatedImage) -> list:
    return [GroundTruth(lab.class_id, lab.corners(image.width, image.height)) for lab in image.labels]


def evaluate_model(model, images: Sequence[AnnotatedImage], config: InferenceConfig = EVAL_CONFIG,
                   batch_size: int = 16, model_id: str = "", model_size_bytes: Optional[int] = None,
                   **kwargs) -> EvaluationReport:
    if not images:
        raise ValueError("cannot evaluate on an empty image set")
    dets = detect_images(model, images, config, batch_size)
    return evaluate(dets, [ground_truths(im) for im in images], model_id=model_id,
                    model_size_bytes=model_size_bytes, **kwargs)


# --------------------------------------------------------------------------
# sequences and timing


@dataclass
class TimingSummary:
    frames: int
    total_s: float
    mean_s: float
    median_s: float
    max_s: float
    fps: float

    @classmethod
    def from_latencies(cls, latencies: Sequence[float]) -> "TimingSummary":
        if not latencies:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0)
        total = float(sum(latencies))
        return cls(len(latencies), total, total / len(latencies), float(statistics.median(latencies)),
                   float(max(latencies)), len(latencies) / total if total > 0 else 0.0)

    def to_csv(self) -> str:
        return ("frames,total_s,mean_s,median_s,max_s,fps\n"
                f"{self.frames},{self.total_s:.6f},{self.mean_s:.6f},{self.median_s:.6f},"
                f"{self.max_s:.6f},{self.fps:.6f}\n")


@dataclass
class SequenceResult:
    frames: list  # (frame name, detections)
    latencies: list
    errors: list = field(default_factory=list)  # (frame name, reason)

    @property
    def summary(self) -> TimingSummary:
        return TimingSummary.from_latencies(self.latencies)


def detect_sequence(model, frame_dir, config: InferenceConfig = InferenceConfig()) -> SequenceResult:
    """Run detect_image over every file in ``frame_dir`` in lexicographic order."""
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise FileNotFoundError(f"frame directory {frame_dir} does not exist")
    result = SequenceResult([], [])
    for path in sorted(p for p in frame_dir.iterdir() if p.is_file()):
        try:
            pixels = read_ppm(path)
        except ImageReadError as exc:
            result.errors.append((path.name, str(exc)))
            continue
        dets, latency = detect_image(model, pixels, config)
        result.frames.append((path.name, dets))
        result.latencies.append(latency)
    return result


def write_detections_csv(path, frames: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "class_id", "confidence", "x1", "y1", "x2", "y2"])
        for name, dets in frames:
            for d in dets:
                writer.writerow([name, d.class_id, f"{d.confidence:.6f}"] + [int(round(v)) for v in d.box])
