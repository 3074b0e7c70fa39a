import json

import pytest

from pcdf.evaluation import (
    Detection,
    average_precision,
    condition_report,
    evaluate,
    format_report,
    load_report,
    match_detections,
    write_report,
)
from pcdf.schema import ConditionRecord, OrientedBox
from pcdf.selftest import micro_set


def box(cx, cy, c=0):
    return OrientedBox(cx, cy, 10, 10, 0.0, c)


def test_micro_set_exact():
    dets, gts, expected = micro_set()
    aps, m, counts = evaluate(dets, gts, num_classes=3)
    names = list(aps)
    assert aps[names[0]] == pytest.approx(13 / 15, abs=1e-15)
    assert aps[names[1]] == 1.0
    assert aps[names[2]] is None
    assert m == pytest.approx(expected, abs=1e-15)
    assert list(counts.values()) == [3, 2, 0]


def test_ap_perfect_and_empty():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([True], 0) is None


def test_ap_is_envelope_interpolated():
    # TP, FP, TP over 2 GT: recall 0.5 at P=1, recall 1 at P=2/3.
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_duplicate_detections_count_once():
    order, labels = match_detections([Detection(box(5, 5), 0.9), Detection(box(5, 5), 0.8)], [box(5, 5)])
    assert labels == [True, False]


def test_class_mismatch_is_false_positive():
    _, labels = match_detections([Detection(box(5, 5, 1), 0.9)], [box(5, 5, 0)])
    assert labels == [False]


def test_matching_prefers_highest_score_then_earlier_index():
    dets = [Detection(box(5, 5), 0.5), Detection(box(5, 5), 0.5)]
    order, labels = match_detections(dets, [box(5, 5)])
    assert order == [0, 1] and labels == [True, False]


def test_iou_threshold_is_inclusive():
    # A 10x10 detection centred in a 10x20 ground truth: IoU = 100 / 200 exactly.
    gt = OrientedBox(20, 20, 10, 20, 0.0, 0)
    _, labels = match_detections([Detection(box(20, 20), 0.9)], [gt], iou_thresh=0.5)
    assert labels == [True]


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        evaluate([[]], [[], []])


def test_condition_report_round_trip(tmp_path):
    dets, gts, _ = micro_set()
    conds = [ConditionRecord(100.0 + 50 * i, 10.0, "Night", "Night", "Night", "Road") for i in range(5)]
    rep = condition_report(dets, gts, conds, num_classes=3)
    cells = rep.per_condition["illumination"]
    assert cells["Night"].count == 5 and cells["Normal"].count == 0 and cells["Normal"].map50 is None
    assert rep.per_condition["altitude"]["[0,120]"].count == 1
    p = tmp_path / "r" / "report.json"
    write_report(rep, p)
    back = load_report(p)
    assert back.map50 == rep.map50
    assert back.per_condition["illumination"]["Night"].count == 5
    rows = [json.loads(x) for x in p.with_suffix(".jsonl").read_text().splitlines()]
    assert rows[0]["attribute"] == "all"
    text = format_report(back, populated_only=True)
    assert "IL" in text and "Normal" not in text.split("IL", 1)[1]
