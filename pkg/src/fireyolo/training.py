"""Target assignment, compound detection loss, vanilla SGD and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .checkpoint import save_model
from .dataset import AnnotatedImage, BoxLabel, make_batches, stretch_resize
from .detector import DetectorModel, ModelConfig
from .inference import EVAL_CONFIG, InferenceConfig, evaluate_model
from .tensor import Tape, Tensor, _track, backward, sigmoid_array

log = logging.getLogger(__name__)

REDUCTIONS = ("none", "mean", "sum")


@dataclass
class LossConfig:
    pos_weight: Union[float, Sequence[float]] = 1.0
    sample_weight: float = 1.0
    reduction: str = "mean"
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5
    lambda_box: float = 0.05
    anchor_ratio_threshold: float = 4.0

    def __post_init__(self):
        if np.any(np.asarray(self.pos_weight, dtype=float) <= 0):
            raise ValueError(f"pos_weight must be positive, got {self.pos_weight}")
        if not self.sample_weight > 0:
            raise ValueError(f"sample_weight must be positive, got {self.sample_weight}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        lambdas = (self.lambda_obj, self.lambda_cls, self.lambda_box)
        if min(lambdas) < 0 or max(lambdas) == 0:
            raise ValueError(f"loss balance weights must be non-negative and not all zero, got {lambdas}")
        if not self.anchor_ratio_threshold > 1:
            raise ValueError(f"anchor_ratio_threshold must exceed 1, got {self.anchor_ratio_threshold}")

    def class_pos_weights(self, num_classes: int) -> np.ndarray:
        pw = np.asarray(self.pos_weight, dtype=np.float64)
        if pw.ndim == 0:
            return np.full(num_classes, float(pw))
        if pw.shape != (num_classes,):
            raise ValueError(f"pos_weight has {pw.size} entries for {num_classes} classes")
        return pw


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 64
    schedule: str = "constant"
    final_lr_fraction: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"schedule must be 'constant' or 'linear', got {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant" or self.epochs == 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * (1 - (1 - self.final_lr_fraction) * frac)


# --------------------------------------------------------------------------
# elementwise losses


def bce_terms(x: np.ndarray, y: np.ndarray, w=1.0, p=1.0) -> tuple:
    """Per-element -w[p*y*log s(x) + (1-y)*log(1-s(x))] and its derivative in x."""
    loss = w * (p * y * np.logaddexp(0.0, -x) + (1 - y) * np.logaddexp(0.0, x))
    grad = w * ((p * y + 1 - y) * sigmoid_array(x) - p * y)
    return loss, grad


def _reduce(values: np.ndarray, grads: np.ndarray, reduction: str) -> tuple:
    if reduction == "mean":
        n = max(values.size, 1)
        return values.sum() / n, grads / n
    if reduction == "sum":
        return values.sum(), grads
    return values, grads


def bce_with_logits(logits: Tensor, targets, w_n=1.0, pos_weight=1.0, reduction: str = "mean",
                    tape: Optional[Tape] = None) -> Tensor:
    """Binary cross-entropy on logits in log-sum-exp form.

    ``pos_weight`` broadcasts against the last axis (one weight per class).
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits shape {logits.shape}")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    x = logits.data.astype(np.float64)
    loss, grad = bce_terms(x, y, np.asarray(w_n, dtype=np.float64), np.asarray(pos_weight, dtype=np.float64))
    value, grad = _reduce(loss, grad, reduction)
    dtype = logits.dtype
    out = Tensor(np.asarray(value, dtype=dtype))
    return _track(tape, (logits,), out, lambda g: ((g * grad).astype(dtype),))


def _iou_xywh(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """IoU of (k, 4) center-size boxes and dIoU/d(pred)."""
    px, py, pw, ph = pred.T
    gx, gy, gw, gh = gt.T
    p1x, p2x, p1y, p2y = px - pw / 2, px + pw / 2, py - ph / 2, py + ph / 2
    g1x, g2x, g1y, g2y = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2
    iw_raw = np.minimum(p2x, g2x) - np.maximum(p1x, g1x)
    ih_raw = np.minimum(p2y, g2y) - np.maximum(p1y, g1y)
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    d_inter = (union + inter) / union ** 2
    d_area = -inter / union ** 2
    ox, oy = iw_raw > 0, ih_raw > 0
    d_p2x = d_inter * ih * (ox & (p2x < g2x))
    d_p1x = -d_inter * ih * (ox & (p1x > g1x))
    d_p2y = d_inter * iw * (oy & (p2y < g2y))
    d_p1y = -d_inter * iw * (oy & (p1y > g1y))
    grad = np.stack([
        d_p1x + d_p2x,
        d_p1y + d_p2y,
        (d_p2x - d_p1x) / 2 + d_area * ph,
        (d_p2y - d_p1y) / 2 + d_area * pw,
    ], axis=1)
    return iou, grad


def iou_box_loss(pred_box, gt_box) -> float:
    """1 - IoU for two (cx, cy, w, h) pixel boxes."""
    pred = np.asarray(pred_box, dtype=np.float64).reshape(1, 4)
    gt = np.asarray(gt_box, dtype=np.float64).reshape(1, 4)
    if np.any(pred[:, 2:] <= 0) or np.any(gt[:, 2:] <= 0):
        raise ValueError("box widths and heights must be positive")
    return float(1.0 - _iou_xywh(pred, gt)[0][0])


# --------------------------------------------------------------------------
# target assignment


@dataclass
class TargetAssignment:
    """Positive anchors per scale and the objectness target maps for one batch."""

    batch_size: int
    grid_sizes: list
    anchors: np.ndarray  # (3, 3, 2) pixels
    strides: tuple
    num_classes: int
    matches: list  # per scale: int array (k, 5) of (image, grid_x, grid_y, anchor, gt_index)
    gt_boxes: np.ndarray  # (G, 4) pixel cx, cy, w, h
    gt_classes: np.ndarray  # (G,)
    obj_targets: list  # per scale: (N, 3, H, W)

    @property
    def num_positives(self) -> int:
        return int(sum(len(m) for m in self.matches))


def _per_image_labels(gt) -> list:
    gt = list(gt)
    if gt and isinstance(gt[0], BoxLabel):
        return [gt]
    return [list(g) for g in gt]


def assign_targets(gt, model_config: ModelConfig, loss_config: LossConfig = LossConfig()) -> TargetAssignment:
    """Center-cell anchor matching with a per-dimension ratio test and best-anchor fallback.

    ``gt`` holds one list of BoxLabel per image (a flat list means one image).
    """
    per_image = _per_image_labels(gt)
    size = model_config.input_size
    anchors = np.asarray(model_config.anchors, dtype=np.float64)
    grids = [size // s for s in model_config.strides]
    thr = loss_config.anchor_ratio_threshold
    matches = [[] for _ in grids]
    obj = [np.zeros((len(per_image), len(anchors[s]), g, g)) for s, g in enumerate(grids)]
    boxes, classes = [], []
    for b, labels in enumerate(per_image):
        for lab in labels:
            if not (0 <= lab.cx <= 1 and 0 <= lab.cy <= 1 and 0 < lab.w <= 1 and 0 < lab.h <= 1):
                raise ValueError(f"ground-truth box {lab} outside normalized [0, 1] coordinates")
            if lab.class_id >= model_config.num_classes:
                raise ValueError(f"class {lab.class_id} outside model's {model_config.num_classes} classes")
            gi = len(boxes)
            boxes.append((lab.cx * size, lab.cy * size, lab.w * size, lab.h * size))
            classes.append(lab.class_id)
            w, h = lab.w * size, lab.h * size
            ratios = np.maximum.reduce([w / anchors[..., 0], anchors[..., 0] / w, h / anchors[..., 1], anchors[..., 1] / h])
            hits = np.argwhere(ratios < thr)
            if len(hits) == 0:
                hits = [np.unravel_index(np.argmin(ratios), ratios.shape)]
            for s, a in hits:
                g = grids[s]
                gx = min(int(math.floor(lab.cx * g)), g - 1)
                gy = min(int(math.floor(lab.cy * g)), g - 1)
                matches[s].append((b, gx, gy, int(a), gi))
                obj[s][b, a, gy, gx] = 1.0
    return TargetAssignment(
        batch_size=len(per_image),
        grid_sizes=grids,
        anchors=anchors,
        strides=tuple(model_config.strides),
        num_classes=model_config.num_classes,
        matches=[np.array(m, dtype=np.int64).reshape(-1, 5) for m in matches],
        gt_boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        gt_classes=np.array(classes, dtype=np.int64),
        obj_targets=obj,
    )


# --------------------------------------------------------------------------
# compound loss


@dataclass
class LossBreakdown:
    total: Tensor
    obj: float
    cls: float
    box: float
    total_value: float
    num_positives: int

    def as_dict(self) -> dict:
        return {"total": self.total_value, "obj": self.obj, "cls": self.cls, "box": self.box}


def compute_loss(raw_maps: Sequence[Tensor], assignment: TargetAssignment, loss_config: LossConfig = LossConfig(),
                 tape: Optional[Tape] = None) -> LossBreakdown:
    """lambda_obj * BCE(objectness) + lambda_cls * BCE(classes at positives) + lambda_box * (1 - IoU).

    Evaluated in float64 as one fused tape operation over the three raw maps.
    """
    if loss_config.reduction == "none":
        raise ValueError("compute_loss needs a 'mean' or 'sum' reduction")
    if len(raw_maps) != len(assignment.grid_sizes):
        raise ValueError(f"{len(raw_maps)} raw maps for {len(assignment.grid_sizes)} assigned scales")
    na = assignment.anchors.shape[1]
    no = 5 + assignment.num_classes
    maps = []
    for m, g in zip(raw_maps, assignment.grid_sizes):
        n, ch, h, w = m.shape
        if n != assignment.batch_size or (h, w) != (g, g) or ch != na * no:
            raise ValueError(f"raw map {m.shape} does not match assignment "
                             f"(batch {assignment.batch_size}, grid {g}, {na * no} channels)")
        maps.append(m.data.astype(np.float64).reshape(n, na, no, h, w))
    grads = [np.zeros_like(m) for m in maps]
    red = loss_config.reduction
    wn = loss_config.sample_weight

    # objectness over every cell and anchor of every scale
    obj_sum, obj_count = 0.0, 0
    for s, m in enumerate(maps):
        loss, g = bce_terms(m[:, :, 4], assignment.obj_targets[s], wn, 1.0)
        obj_sum += loss.sum()
        obj_count += loss.size
        grads[s][:, :, 4] = g
    obj_scale = 1.0 / obj_count if red == "mean" else 1.0
    obj_loss = obj_sum * obj_scale

    # classes and boxes at positives
    pw = loss_config.class_pos_weights(assignment.num_classes)
    cls_sum, box_sum = 0.0, 0.0
    n_pos = assignment.num_positives
    cls_count = n_pos * assignment.num_classes
    cls_scale = (1.0 / cls_count if cls_count else 0.0) if red == "mean" else 1.0
    box_scale = (1.0 / n_pos if n_pos else 0.0) if red == "mean" else 1.0
    box_grads = []
    for s, m in enumerate(maps):
        idx = assignment.matches[s]
        if len(idx) == 0:
            box_grads.append(None)
            continue
        b, gx, gy, a, gi = idx.T
        onehot = np.zeros((len(idx), assignment.num_classes))
        onehot[np.arange(len(idx)), assignment.gt_classes[gi]] = 1.0
        loss, g = bce_terms(m[b, a, 5:, gy, gx], onehot, wn, pw[None, :])
        cls_sum += loss.sum()
        cls_grad = g

        t = m[b, a, 0:4, gy, gx]
        sg = sigmoid_array(t)
        ds = sg * (1 - sg)
        stride = assignment.strides[s]
        anc = assignment.anchors[s][a]
        pred = np.stack([
            (2 * sg[:, 0] - 0.5 + gx) * stride,
            (2 * sg[:, 1] - 0.5 + gy) * stride,
            (2 * sg[:, 2]) ** 2 * anc[:, 0],
            (2 * sg[:, 3]) ** 2 * anc[:, 1],
        ], axis=1)
        iou, diou = _iou_xywh(pred, assignment.gt_boxes[gi])
        box_sum += np.sum(1.0 - iou)
        dpred_dt = np.stack([
            2 * ds[:, 0] * stride,
            2 * ds[:, 1] * stride,
            8 * sg[:, 2] * ds[:, 2] * anc[:, 0],
            8 * sg[:, 3] * ds[:, 3] * anc[:, 1],
        ], axis=1)
        box_grads.append((b, a, gy, gx, cls_grad, -diou * dpred_dt))

    cls_loss = cls_sum * cls_scale
    box_loss = box_sum * box_scale
    lo, lc, lb = loss_config.lambda_obj, loss_config.lambda_cls, loss_config.lambda_box
    total = lo * obj_loss + lc * cls_loss + lb * box_loss

    for s, entry in enumerate(box_grads):
        grads[s][:, :, 4] *= lo * obj_scale
        if entry is None:
            continue
        b, a, gy, gx, cls_grad, box_grad = entry
        np.add.at(grads[s], (b, a, slice(5, None), gy, gx), lc * cls_scale * cls_grad)
        np.add.at(grads[s], (b, a, slice(0, 4), gy, gx), lb * box_scale * box_grad)

    dtype = raw_maps[0].dtype
    out = Tensor(np.asarray(total, dtype=dtype))
    shapes = [m.shape for m in raw_maps]

    def _backward(g):
        scale = float(np.asarray(g).reshape(-1)[0])
        return tuple((gr * scale).reshape(shape).astype(dtype) for gr, shape in zip(grads, shapes))

    _track(tape, tuple(raw_maps), out, _backward)
    return LossBreakdown(out, float(obj_loss), float(cls_loss), float(box_loss), float(total), n_pos)


# --------------------------------------------------------------------------
# optimizer


class MissingGradientError(RuntimeError):
    pass


def sgd_step(params, lr: float) -> None:
    """w <- w - lr * dL/dw for every parameter, then clear the gradients."""
    items = list(params.items()) if isinstance(params, dict) else [(p.name, p) for p in params]
    for name, p in items:
        if p.grad is None:
            raise MissingGradientError(f"parameter {name or '<unnamed>'} has no gradient")
    for _, p in items:
        arr = p.data
        arr -= arr.dtype.type(lr) * p.grad
        p.grad = None


# --------------------------------------------------------------------------
# epoch loop


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss diverged ({value}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_obj: float
    loss_cls: float
    loss_box: float
    val_precision: float
    val_recall: float
    val_f1: float
    val_map50: float
    epoch_seconds: float


HISTORY_COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_map50: float = -1.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [f"{getattr(r, c):.6f}" for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _fit_size(images: Sequence[AnnotatedImage], size: int) -> list:
    return [im if im.pixels.shape[:2] == (size, size) else stretch_resize(im, size) for im in images]


def train_step(model: DetectorModel, batch, loss_config: LossConfig, lr: float) -> LossBreakdown:
    tape = Tape()
    maps = model.forward(batch.images, "train", tape)
    assignment = assign_targets(batch.labels, model.config, loss_config)
    loss = compute_loss(maps, assignment, loss_config, tape)
    if math.isfinite(loss.total_value):
        backward(loss.total, tape)
        sgd_step(model.params, lr)
    return loss


def train(model: DetectorModel, train_set: Sequence[AnnotatedImage], val_set: Sequence[AnnotatedImage],
          optimizer_config: OptimizerConfig = OptimizerConfig(), loss_config: LossConfig = LossConfig(),
          seed: int = 0, out_dir=None, eval_config: InferenceConfig = EVAL_CONFIG) -> TrainingHistory:
    """Seeded SGD training with per-epoch validation.

    With ``out_dir`` set, writes ``history.csv``, ``last.ckpt`` and the best-mAP
    ``best.ckpt`` after every epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    if optimizer_config.batch_size > len(train_set):
        raise ValueError(f"batch size {optimizer_config.batch_size} exceeds {len(train_set)} training images")
    size = model.config.input_size
    train_set, val_set = _fit_size(train_set, size), _fit_size(val_set, size)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = TrainingHistory()
    for epoch in range(optimizer_config.epochs):
        start = time.perf_counter()
        lr = optimizer_config.lr_at(epoch)
        sums = np.zeros(4)
        n_batches = 0
        for b, batch in enumerate(make_batches(train_set, optimizer_config.batch_size, epoch_seed(seed, epoch))):
            loss = train_step(model, batch, loss_config, lr)
            if not math.isfinite(loss.total_value):
                raise DivergenceError(epoch, b, loss.total_value)
            sums += (loss.total_value, loss.obj, loss.cls, loss.box)
            n_batches += 1
        means = sums / n_batches
        report = evaluate_model(model, val_set, eval_config)
        rec = EpochRecord(epoch, *means, report.precision, report.recall, report.f1, report.map50,
                          time.perf_counter() - start)
        history.records.append(rec)
        improved = report.map50 > history.best_map50
        if improved:
            history.best_epoch, history.best_map50 = epoch, report.map50
        if out_dir is not None:
            save_model(model, out_dir / "last.ckpt")
            if improved:
                save_model(model, out_dir / "best.ckpt")
            history.write_csv(out_dir / "history.csv")
        log.info("epoch %d lr %.5f loss %.4f (obj %.4f cls %.4f box %.4f) val P %.3f R %.3f F1 %.3f mAP50 %.3f %.1fs",
                 epoch, lr, *means, report.precision, report.recall, report.f1, report.map50, rec.epoch_seconds)
    return history
