"""Oriented-box mAP@0.5 with per-class and per-condition breakdowns."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from .schema import (
    ALTITUDE_BUCKETS,
    ANGLE_BUCKETS,
    ATTRIBUTES,
    CLASS_NAMES,
    ILLUMINATION_CLASSES,
    SCENARIO_CLASSES,
    TIME_CLASSES,
    WEATHER_CLASSES,
    ConditionRecord,
    OrientedBox,
    bucketize,
)

ATTRIBUTE_CODES = {"altitude": "AL", "angle": "AN", "time": "TI", "weather": "WE", "illumination": "IL", "scenario": "SC"}
ATTRIBUTE_VALUES = {
    "altitude": ALTITUDE_BUCKETS,
    "angle": ANGLE_BUCKETS,
    "time": TIME_CLASSES,
    "weather": WEATHER_CLASSES,
    "illumination": ILLUMINATION_CLASSES,
    "scenario": SCENARIO_CLASSES,
}


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    score: float

    @property
    def class_id(self) -> int:
        return self.box.class_id


def _arr(b) -> np.ndarray:
    if isinstance(b, OrientedBox):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)[:5]


def rotated_iou(a, b) -> float:
    """IoU of two oriented boxes by convex polygon clipping; zero-area boxes give 0."""
    return float(geometry.rotated_iou(_arr(a), _arr(b)))


def match_detections(dets: Sequence[Detection], gts: Sequence[OrientedBox], iou_thresh: float = 0.5) -> tuple[list[int], list[bool]]:
    """Greedy one-to-one matching in descending score order.

    Returns ``(order, is_tp)``: ``order[k]`` is the index into ``dets`` of the k-th
    ranked detection.  Ties in score keep the earlier index first.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    labels = []
    if dets and gts:
        iou = geometry.rotated_iou_matrix(
            np.stack([dets[i].box.as_array() for i in order]),
            np.stack([g.as_array() for g in gts]),
        )
    for k, i in enumerate(order):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != dets[i].class_id:
                continue
            if iou[k, j] >= iou_thresh and iou[k, j] > best:
                best, best_j = iou[k, j], j
        if best_j >= 0:
            matched[best_j] = True
            labels.append(True)
        else:
            labels.append(False)
    return order, labels


def average_precision(labels: Sequence[bool], gt_count: int) -> float | None:
    """All-point interpolated AP of a ranked TP/FP sequence; ``None`` when there is no ground truth."""
    if gt_count <= 0:
        return None
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(labels, dtype=np.float64))
    if len(tp) == 0:
        return 0.0
    recall = np.concatenate([[0.0], tp / gt_count])
    precision = np.concatenate([[1.0], tp / np.maximum(tp + fp, 1e-12)])
    # Envelope: best precision achievable at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


@dataclass
class ClassPR:
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    gt_count: int = 0


def evaluate(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[OrientedBox]],
    num_classes: int = len(CLASS_NAMES),
    iou_thresh: float = 0.5,
) -> tuple[dict[str, float | None], float | None, dict[str, int]]:
    """Pool matches over images; returns per-class AP, mAP over classes with GT, GT counts."""
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    per_class = [ClassPR() for _ in range(num_classes)]
    for img, (dets, gts) in enumerate(zip(detections, ground_truth)):
        for g in gts:
            if g.class_id < num_classes:
                per_class[g.class_id].gt_count += 1
        for c in range(num_classes):
            cd = [d for d in dets if d.class_id == c]
            if not cd:
                continue
            cg = [g for g in gts if g.class_id == c]
            order, labels = match_detections(cd, cg, iou_thresh)
            for rank, (i, lab) in enumerate(zip(order, labels)):
                per_class[c].scores.append(cd[i].score)
                per_class[c].labels.append(lab)
                per_class[c].keys.append((img, rank))
    aps: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    for c, pr in enumerate(per_class):
        idx = sorted(range(len(pr.scores)), key=lambda k: (-pr.scores[k], pr.keys[k]))
        aps[CLASS_NAMES[c]] = average_precision([pr.labels[k] for k in idx], pr.gt_count)
        counts[CLASS_NAMES[c]] = pr.gt_count
    valid = [v for v in aps.values() if v is not None]
    return aps, (float(np.mean(valid)) if valid else None), counts


@dataclass
class ConditionCell:
    map50: float | None
    count: int


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map50: float | None
    gt_counts: dict[str, int]
    per_condition: dict[str, dict[str, ConditionCell]]
    num_samples: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": self.per_class_ap,
            "map50": self.map50,
            "gt_counts": self.gt_counts,
            "num_samples": self.num_samples,
            "per_condition": {
                a: {v: {"map50": c.map50, "count": c.count} for v, c in cells.items()}
                for a, cells in self.per_condition.items()
            },
            **self.extra,
        }

    def records(self) -> list[dict]:
        """Flat machine-readable rows, one per (attribute, value) cell."""
        rows = [{"attribute": "all", "value": "all", "map50": self.map50, "count": self.num_samples}]
        for a, cells in self.per_condition.items():
            for v, c in cells.items():
                rows.append({"attribute": a, "value": v, "map50": c.map50, "count": c.count})
        return rows


def condition_report(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[OrientedBox]],
    records: Sequence[ConditionRecord],
    num_classes: int = len(CLASS_NAMES),
    iou_thresh: float = 0.5,
) -> EvalReport:
    if not (len(detections) == len(ground_truth) == len(records)):
        raise ValueError("detections, ground truth and condition records must align one-to-one")
    aps, m, counts = evaluate(detections, ground_truth, num_classes, iou_thresh)
    buckets = [bucketize(r) for r in records]
    per_condition: dict[str, dict[str, ConditionCell]] = {}
    for attr in ATTRIBUTES:
        cells = {}
        for value in ATTRIBUTE_VALUES[attr]:
            idx = [i for i, b in enumerate(buckets) if b[attr] == value]
            if not idx:
                cells[value] = ConditionCell(None, 0)
                continue
            _, cm, _ = evaluate([detections[i] for i in idx], [ground_truth[i] for i in idx], num_classes, iou_thresh)
            cells[value] = ConditionCell(cm, len(idx))
        per_condition[attr] = cells
    return EvalReport(aps, m, counts, per_condition, len(records))


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def format_report(report: EvalReport, populated_only: bool = False) -> str:
    """Human-readable tables: per-class AP and the per-condition breakdown."""
    lines = ["Per-class AP@0.5 (%)"]
    lines.append("  ".join(f"{k:>5}" for k in report.per_class_ap) + "    mAP")
    lines.append("  ".join(f"{_pct(v):>5}" for v in report.per_class_ap.values()) + f"  {_pct(report.map50):>5}")
    lines.append("")
    lines.append(f"{'Cond':<4} {'Value':<18} {'mAP (%)':>8} {'n':>6}")
    for attr, cells in report.per_condition.items():
        for value, cell in cells.items():
            if populated_only and cell.count == 0:
                continue
            lines.append(f"{ATTRIBUTE_CODES[attr]:<4} {value:<18} {_pct(cell.map50):>8} {cell.count:>6}")
    return "\n".join(lines)


def write_report(report: EvalReport, path) -> None:
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    p.with_suffix(".txt").write_text(format_report(report) + "\n")
    with open(p.with_suffix(".jsonl"), "w") as fh:
        for row in report.records():
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def report_from_dict(d: dict) -> EvalReport:
    known = {"per_class_ap", "map50", "gt_counts", "num_samples", "per_condition"}
    return EvalReport(
        per_class_ap=d["per_class_ap"],
        map50=d["map50"],
        gt_counts=d.get("gt_counts", {}),
        per_condition={
            a: {v: ConditionCell(c["map50"], c["count"]) for v, c in cells.items()}
            for a, cells in d["per_condition"].items()
        },
        num_samples=d.get("num_samples", 0),
        extra={k: v for k, v in d.items() if k not in known},
    )


def load_report(path) -> EvalReport:
    from pathlib import Path

    return report_from_dict(json.loads(Path(path).read_text()))
