import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcdf import schema
from pcdf.schema import (
    ALTITUDE_BUCKETS,
    AnnotationError,
    AnnotationRecord,
    ConditionRecord,
    OrientedBox,
    SchemaError,
    bucketize,
    check_split_disjoint,
    dump_records,
    load_dataset,
    normalize_theta,
    read_records,
    serialize_record,
)


def make_cond(**kw):
    base = dict(altitude_m=150.0, angle_deg=20.0, time="Night", weather="Night", illumination="Night", scenario="Highway")
    base.update(kw)
    return ConditionRecord(**base)


def make_record(rid="000001", split="train", seed=1, **kw):
    return AnnotationRecord(
        record_id=rid,
        rgb_path=f"images/{rid}_rgb.png",
        ir_path=f"images/{rid}_ir.png",
        condition=make_cond(),
        rgb_boxes=(OrientedBox(10, 12, 8, 4, 0.1, 0),),
        ir_boxes=(OrientedBox(10, 12, 8, 4, 0.1, 0),),
        split=split,
        image_size=(64, 64),
        reliability="ir",
        scene_seed=seed,
        **kw,
    )


def test_schema_has_six_attributes_and_eleven_classes():
    assert schema.SCHEMA.names == ("altitude", "angle", "time", "weather", "illumination", "scenario")
    assert len(schema.CLASS_NAMES) == 11


@pytest.mark.parametrize("alt,bucket", [(50, "[0,120]"), (120, "[0,120]"), (120.001, "(120,300]"), (300, "(120,300]")])
def test_altitude_bucket_boundaries(alt, bucket):
    assert schema.altitude_bucket(alt) == bucket


@pytest.mark.parametrize("ang,bucket", [(0, "[0,30]"), (30, "[0,30]"), (30.5, "(30,75]"), (75, "(30,75]")])
def test_angle_bucket_boundaries(ang, bucket):
    assert schema.angle_bucket(ang) == bucket


def test_condition_validation_errors_name_the_field():
    with pytest.raises(SchemaError) as e:
        make_cond(weather="Hail")
    assert e.value.field == "weather"
    with pytest.raises(SchemaError) as e:
        make_cond(altitude_m=400.0)
    assert e.value.field == "altitude_m"
    with pytest.raises(SchemaError):
        make_cond(angle_deg=float("nan"))


def test_condition_dict_round_trip_and_unknown_keys():
    c = make_cond()
    assert ConditionRecord.from_dict(c.to_dict()) == c
    d = c.to_dict()
    d["season"] = "Spring"
    with pytest.raises(SchemaError):
        ConditionRecord.from_dict(d)


@given(
    alt=st.floats(80, 300),
    ang=st.floats(0, 75),
    t=st.sampled_from(schema.TIME_CLASSES),
    i=st.sampled_from(schema.ILLUMINATION_CLASSES),
)
def test_bucketize_is_total(alt, ang, t, i):
    b = bucketize(make_cond(altitude_m=alt, angle_deg=ang, time=t, illumination=i))
    assert b["altitude"] in ALTITUDE_BUCKETS
    assert b["angle"] in schema.ANGLE_BUCKETS
    assert b["time"] == t and b["illumination"] == i


@given(st.floats(-50, 50))
def test_normalize_theta_range_and_half_turn_symmetry(t):
    n = normalize_theta(t)
    assert -math.pi / 2 <= n < math.pi / 2
    assert math.isclose(math.cos(2 * n), math.cos(2 * t), abs_tol=1e-9)


def test_box_rejects_bad_extent_and_class():
    with pytest.raises(SchemaError):
        OrientedBox(0, 0, 0, 1)
    with pytest.raises(SchemaError):
        OrientedBox(0, 0, 1, 1, 0, 11)


def test_box_corners_area():
    b = OrientedBox(5, 5, 4, 2, 0.3)
    c = b.corners()
    x, y = c[:, 0], c[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert area == pytest.approx(8.0)


def test_record_rejects_center_outside_image():
    with pytest.raises(SchemaError):
        AnnotationRecord("1", "a", "b", make_cond(), (OrientedBox(70, 5, 2, 2),), (), "train", (64, 64))


def test_serialization_is_canonical(tmp_path):
    recs = [make_record("000002", seed=2), make_record("000001", seed=1)]
    p = tmp_path / "a.jsonl"
    dump_records(recs, p)
    back = read_records(p, check_paths=False)
    assert [r.record_id for r in back] == ["000001", "000002"]
    p2 = tmp_path / "b.jsonl"
    dump_records(back, p2)
    assert p.read_bytes() == p2.read_bytes()
    assert json.loads(serialize_record(back[0]))["condition"]["illumination"] == "Night"


def test_parse_errors_carry_line_and_field(tmp_path):
    good = serialize_record(make_record())
    bad = json.loads(good)
    bad["condition"]["time"] = "Midnight"
    p = tmp_path / "x.jsonl"
    p.write_text(good.replace("000001", "000009") + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(AnnotationError) as e:
        read_records(p, check_paths=False)
    assert e.value.line == 2 and e.value.field == "time"


def test_missing_raster_is_reported(tmp_path):
    p = tmp_path / "x.jsonl"
    dump_records([make_record()], p)
    with pytest.raises(AnnotationError) as e:
        read_records(p)
    assert e.value.field == "rgb_path"


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "x.jsonl"
    line = serialize_record(make_record())
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(AnnotationError):
        read_records(p, check_paths=False)


def test_split_filter_and_disjointness(tmp_path):
    p = tmp_path / "x.jsonl"
    dump_records([make_record("1", "train", 1), make_record("2", "test", 2)], p)
    assert [r.record_id for r in load_dataset(p, "test", check_paths=False)] == ["2"]
    assert len(load_dataset(p, "all", check_paths=False)) == 2
    with pytest.raises(SchemaError):
        load_dataset(p, "val", check_paths=False)
    check_split_disjoint(load_dataset(p, None, check_paths=False))
    with pytest.raises(SchemaError):
        check_split_disjoint([make_record("1", "train", 5), make_record("2", "test", 5)])


def test_data_root_override(tmp_path, monkeypatch):
    p = tmp_path / "x.jsonl"
    dump_records([make_record()], p)
    other = tmp_path / "elsewhere"
    monkeypatch.setenv(schema.DATA_ROOT_ENV, str(other))
    rec = read_records(p, check_paths=False)[0]
    assert rec.rgb_file == other / "images/000001_rgb.png"
