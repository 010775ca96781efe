"""Detection matching, precision/recall/F1 sweeps, AP/mAP, curve files and model tables.

Detections and ground truths are passed per image: a list with one inner list
per image. A flat list of Detection/GroundTruth is treated as a single image.

Degenerate counts follow fixed conventions so every curve is a total function:
precision is 1 with no detections, recall is 1 with no ground truth, F1 is 0
when precision + recall is 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Detection, GroundTruth, iou_matrix, ranking_key

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(101))


@dataclass
class MatchOutcome:
    """Greedy matching result for detections processed in ranking order."""

    confidences: np.ndarray
    class_ids: np.ndarray
    tp: np.ndarray  # bool per detection
    matched_gt: np.ndarray  # gt index or -1
    num_gt: int

    @property
    def tp_count(self) -> int:
        return int(self.tp.sum())

    @property
    def fp_count(self) -> int:
        return int(len(self.tp) - self.tp.sum())

    @property
    def fn_count(self) -> int:
        return self.num_gt - self.tp_count


@dataclass(frozen=True)
class CurvePoint:
    confidence: float
    precision: float
    recall: float
    f1: float


@dataclass
class EvaluationReport:
    per_class_ap: dict
    map50: float
    curve: list
    best_threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    iou_threshold: float = 0.5
    model_id: str = ""
    model_size_bytes: Optional[int] = None
    map_multi: Optional[float] = None

    @property
    def num_classes(self) -> int:
        return len(self.per_class_ap)

    def summary(self) -> str:
        lines = [
            f"model            {self.model_id or '-'}",
            f"mAP@{self.iou_threshold:g}          {self.map50:.4f}",
            f"best F1          {self.f1:.4f} at conf >= {self.best_threshold:.2f}",
            f"precision        {self.precision:.4f} at conf >= {self.best_threshold:.2f}",
            f"recall           {self.recall:.4f} at conf >= {self.best_threshold:.2f}",
            f"TP / FP / FN     {self.tp} / {self.fp} / {self.fn}",
        ]
        for c, ap in sorted(self.per_class_ap.items()):
            lines.append(f"AP class {c:<7} {ap:.4f}")
        if self.map_multi is not None:
            lines.append(f"mAP@[.5:.95]     {self.map_multi:.4f}")
        return "\n".join(lines)


def _per_image(items) -> list:
    items = list(items)
    if not items:
        return [[]]
    if isinstance(items[0], (Detection, GroundTruth)):
        return [items]
    return [list(x) for x in items]


def match_detections(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float = 0.5) -> MatchOutcome:
    """Greedy single-image matching.

    Each detection, in ranking order, takes the unmatched same-class ground
    truth with the highest IoU >= threshold (ties to the lowest index).
    """
    dets = sorted(detections, key=ranking_key)
    n = len(dets)
    tp = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    if n and gts:
        ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
        gt_cls = np.array([g.class_id for g in gts])
        taken = np.zeros(len(gts), dtype=bool)
        for i, d in enumerate(dets):
            cand = np.where((gt_cls == d.class_id) & ~taken & (ious[i] >= iou_threshold), ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                tp[i] = True
                matched[i] = j
                taken[j] = True
    return MatchOutcome(
        confidences=np.array([d.confidence for d in dets], dtype=np.float64),
        class_ids=np.array([d.class_id for d in dets], dtype=np.int64),
        tp=tp,
        matched_gt=matched,
        num_gt=len(gts),
    )


def match_images(detections, gts, iou_threshold: float = 0.5) -> MatchOutcome:
    """Match every image independently and pool the results in global ranking order."""
    per_dets, per_gts = _per_image(detections), _per_image(gts)
    if len(per_dets) != len(per_gts):
        raise ValueError(f"{len(per_dets)} detection lists for {len(per_gts)} ground-truth lists")
    outcomes = [match_detections(d, g, iou_threshold) for d, g in zip(per_dets, per_gts)]
    conf = np.concatenate([o.confidences for o in outcomes])
    # stable sort keeps the within-image ranking for equal confidences
    order = np.argsort(-conf, kind="stable")
    return MatchOutcome(
        confidences=conf[order],
        class_ids=np.concatenate([o.class_ids for o in outcomes])[order],
        tp=np.concatenate([o.tp for o in outcomes])[order],
        matched_gt=np.concatenate([o.matched_gt for o in outcomes])[order],
        num_gt=sum(o.num_gt for o in outcomes),
    )


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def precision_recall_f1(outcome: MatchOutcome) -> tuple:
    return prf_from_counts(outcome.tp_count, outcome.fp_count, outcome.fn_count)


def _sweep_outcome(outcome: MatchOutcome, grid: Sequence[float]) -> list:
    cum_tp = np.concatenate([[0], np.cumsum(outcome.tp)])
    # confidences are descending; count of detections with conf >= t
    neg = -outcome.confidences
    points = []
    for t in grid:
        k = int(np.searchsorted(neg, -t, side="right"))
        tp = int(cum_tp[k])
        p, r, f1 = prf_from_counts(tp, k - tp, outcome.num_gt - tp)
        points.append(CurvePoint(float(t), p, r, f1))
    return points


def confidence_sweep(detections, gts, iou_threshold: float = 0.5,
                     grid: Sequence[float] = DEFAULT_GRID) -> list:
    """Precision/recall/F1 keeping only detections with confidence >= t, for each t in grid.

    Matching is greedy in ranking order, so the detections kept at a threshold
    are a prefix of the full ranking and their match flags are unchanged;
    one full matching serves every threshold.
    """
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("confidence grid must be sorted ascending")
    return _sweep_outcome(match_images(detections, gts, iou_threshold), grid)


def average_precision_from_outcome(outcome: MatchOutcome) -> float:
    if outcome.num_gt == 0 or len(outcome.tp) == 0:
        return 0.0
    cum_tp = np.cumsum(outcome.tp)
    ranks = np.arange(1, len(cum_tp) + 1)
    recall = cum_tp / outcome.num_gt
    precision = cum_tp / ranks
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * envelope))


def average_precision(detections, gts, iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP (area under the right-max precision envelope)."""
    return average_precision_from_outcome(match_images(detections, gts, iou_threshold))


def mean_average_precision(per_class_aps: Sequence[float]) -> float:
    aps = list(per_class_aps)
    if not aps:
        raise ValueError("mAP needs at least one class AP")
    return float(sum(aps) / len(aps))


def _filter_class(per_image, class_id):
    return [[x for x in items if x.class_id == class_id] for items in per_image]


def evaluate(detections, gts, iou_threshold: float = 0.5, grid: Sequence[float] = DEFAULT_GRID,
             model_id: str = "", model_size_bytes: Optional[int] = None,
             map_iou_thresholds: Optional[Sequence[float]] = None) -> EvaluationReport:
    """Full report: per-class AP over classes present in the ground truth, mAP, pooled sweep."""
    per_dets, per_gts = _per_image(detections), _per_image(gts)
    classes = sorted({g.class_id for items in per_gts for g in items})
    if not classes:
        raise ValueError("evaluation needs at least one ground-truth box")
    per_class_ap = {c: average_precision(_filter_class(per_dets, c), _filter_class(per_gts, c), iou_threshold)
                    for c in classes}
    outcome = match_images(per_dets, per_gts, iou_threshold)
    curve = _sweep_outcome(outcome, grid)
    best = max(range(len(curve)), key=lambda i: (curve[i].f1, -i))
    bp = curve[best]
    kept = int(np.sum(outcome.confidences >= bp.confidence))
    tp = int(outcome.tp[:kept].sum())
    map_multi = None
    if map_iou_thresholds:
        map_multi = float(np.mean([
            mean_average_precision([average_precision(_filter_class(per_dets, c), _filter_class(per_gts, c), k)
                                    for c in classes])
            for k in map_iou_thresholds]))
    return EvaluationReport(
        per_class_ap=per_class_ap,
        map50=mean_average_precision(per_class_ap.values()),
        curve=curve,
        best_threshold=bp.confidence,
        precision=bp.precision,
        recall=bp.recall,
        f1=bp.f1,
        tp=tp,
        fp=kept - tp,
        fn=outcome.num_gt - tp,
        iou_threshold=iou_threshold,
        model_id=model_id,
        model_size_bytes=model_size_bytes,
        map_multi=map_multi,
    )


# --------------------------------------------------------------------------
# curve files

CURVES = {
    "p_vs_conf": ("confidence", "value", "Precision vs Confidence", "Confidence", "Precision"),
    "r_vs_conf": ("confidence", "value", "Recall vs Confidence", "Confidence", "Recall"),
    "f1_vs_conf": ("confidence", "value", "F1 vs Confidence", "Confidence", "F1"),
    "p_vs_r": ("recall", "precision", "Precision vs Recall", "Recall", "Precision"),
}


def curve_series(report: EvaluationReport) -> dict:
    c = report.curve
    return {
        "p_vs_conf": [(p.confidence, p.precision) for p in c],
        "r_vs_conf": [(p.confidence, p.recall) for p in c],
        "f1_vs_conf": [(p.confidence, p.f1) for p in c],
        "p_vs_r": [(p.recall, p.precision) for p in c],
    }


def render_svg_chart(points, title: str, xlabel: str, ylabel: str, width: int = 480, height: int = 360) -> str:
    """Standalone line chart with both axes fixed to [0, 1]."""
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + v * pw

    def sy(v):
        return top + (1 - v) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-x-range="0 1" data-y-range="0 1">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for i in range(6):
        v = i / 5
        out.append(f'<line x1="{sx(v):.2f}" y1="{sy(0):.2f}" x2="{sx(v):.2f}" y2="{sy(1):.2f}" stroke="#e6e6e6"/>')
        out.append(f'<line x1="{sx(0):.2f}" y1="{sy(v):.2f}" x2="{sx(1):.2f}" y2="{sy(v):.2f}" stroke="#e6e6e6"/>')
        out.append(f'<text x="{sx(v):.2f}" y="{sy(0) + 16:.2f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{v:.1f}</text>')
        out.append(f'<text x="{sx(0) - 6:.2f}" y="{sy(v) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:.1f}</text>')
    out.append(f'<rect x="{sx(0):.2f}" y="{sy(1):.2f}" width="{pw:.2f}" height="{ph:.2f}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="13">{xlabel}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{ylabel}</text>')
    if points:
        coords = " ".join(f"{sx(min(max(x, 0), 1)):.2f},{sy(min(max(y, 0), 1)):.2f}" for x, y in points)
        out.append(f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_curves(report: EvaluationReport, out_dir) -> list:
    """Write the four curve CSVs and their SVG charts; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    tag = f" ({report.model_id})" if report.model_id else ""
    for name, points in curve_series(report).items():
        xcol, ycol, title, xlabel, ylabel = CURVES[name]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([xcol, ycol])
        for x, y in points:
            writer.writerow([f"{x:.6f}", f"{y:.6f}"])
        csv_path = out_dir / f"{name}.csv"
        csv_path.write_text(buf.getvalue())
        svg_path = out_dir / f"{name}.svg"
        svg_path.write_text(render_svg_chart(points, title + tag, xlabel, ylabel))
        written += [csv_path, svg_path]
    return written


# --------------------------------------------------------------------------
# model comparison


@dataclass
class ComparisonTable:
    models: list
    rows: list = field(default_factory=list)  # (metric name, [values per model])
    thresholds: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric"] + self.models)
        for name, values in self.rows:
            writer.writerow([name] + [_fmt(v) for v in values])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, *(len(m) for m in self.models)) + 2
        lines = ["Metrics".ljust(22) + "".join(m.rjust(width) for m in self.models)]
        for name, values in self.rows:
            lines.append(name.ljust(22) + "".join(_fmt(v).rjust(width) for v in values))
        lines.append("P/R/F1 taken at each model's best-F1 confidence: "
                     + ", ".join(f"{m}={t:.2f}" for m, t in zip(self.models, self.thresholds)))
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.6f}"


def compare_models(reports: Sequence[EvaluationReport]) -> ComparisonTable:
    if not reports:
        raise ValueError("compare_models needs at least one report")
    models = [r.model_id or f"model{i}" for i, r in enumerate(reports)]
    rows = [
        ("Precision", [r.precision for r in reports]),
        ("Recall", [r.recall for r in reports]),
        ("F1", [r.f1 for r in reports]),
        ("mAP", [r.map50 for r in reports]),
        ("Model Size (bytes)", [r.model_size_bytes for r in reports]),
    ]
    return ComparisonTable(models, rows, [r.best_threshold for r in reports])
