"""Condition-annotated RGB-IR data model and the line-delimited annotation format.

Each line of an annotation file is one JSON object describing an aligned image
pair::

    {"condition": {"altitude_m": 150.0, "angle_deg": 20.0, "illumination": "Night",
                   "scenario": "Road", "time": "Night", "weather": "Night"},
     "image_size": [64, 64], "ir_boxes": [[cx, cy, w, h, theta, class_id], ...],
     "ir_path": "images/000001_ir.png", "record_id": "000001",
     "reliability": "ir", "rgb_boxes": [...], "rgb_path": "images/000001_rgb.png",
     "scene_seed": 1, "split": "train"}

Keys are written sorted with compact separators, so a file written by
:func:`dump_records` is canonical and reloads to the same bytes.  Relative paths
are resolved against the annotation file's directory, or against
``$PCDF_DATA_ROOT`` when that variable is set.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATA_ROOT_ENV = "PCDF_DATA_ROOT"

ATTRIBUTES = ("altitude", "angle", "time", "weather", "illumination", "scenario")

TIME_CLASSES = ("Dawn", "Morning", "Noon", "Afternoon", "NearNight", "Night")
WEATHER_CLASSES = ("Sunny", "Cloudy", "Rainy", "AfterRain", "Snowy", "Foggy", "Night")
ILLUMINATION_CLASSES = ("Overexposure", "Normal", "Dim", "Twilight", "NearNight", "Night")

# The first five names are the ones the dataset authors list; the rest are ours.
SCENARIO_GROUPS = {
    "Urban": ("Road", "Parking Lot", "Plaza", "Bridge"),
    "Suburban": ("Neighborhood", "Construction Site", "Factory", "Highway"),
    "Village": ("Village Lane", "Farmland", "Riverside"),
}
SCENARIO_CLASSES = (
    "Road",
    "Neighborhood",
    "Construction Site",
    "Parking Lot",
    "Factory",
    "Highway",
    "Bridge",
    "Plaza",
    "Village Lane",
    "Farmland",
    "Riverside",
)

ALTITUDE_RANGE = (80.0, 300.0)
ANGLE_RANGE = (0.0, 75.0)
ALTITUDE_BUCKETS = ("[0,120]", "(120,300]")
ANGLE_BUCKETS = ("[0,30]", "(30,75]")

CLASS_NAMES = ("CR", "SV", "VN", "BS", "FC", "TK", "ME", "TR", "ER", "CE", "TT")
CLASS_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}

SPLITS = ("train", "test")
RELIABILITY_TAGS = ("rgb", "ir", "balanced")


class SchemaError(ValueError):
    """A value violates the condition schema; ``field`` names the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AnnotationError(ValueError):
    """A malformed line in an annotation file."""

    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field {field!r}: {message}")
        self.line = line
        self.field = field


@dataclass(frozen=True)
class AttributeDef:
    name: str
    classes: tuple[str, ...] = ()
    value_range: tuple[float, float] | None = None
    buckets: tuple[str, ...] = ()

    @property
    def is_numeric(self) -> bool:
        return self.value_range is not None


@dataclass(frozen=True)
class ConditionSchema:
    attributes: tuple[AttributeDef, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def __len__(self) -> int:
        return len(self.attributes)

    def __getitem__(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)


SCHEMA = ConditionSchema(
    (
        AttributeDef("altitude", value_range=ALTITUDE_RANGE, buckets=ALTITUDE_BUCKETS),
        AttributeDef("angle", value_range=ANGLE_RANGE, buckets=ANGLE_BUCKETS),
        AttributeDef("time", classes=TIME_CLASSES),
        AttributeDef("weather", classes=WEATHER_CLASSES),
        AttributeDef("illumination", classes=ILLUMINATION_CLASSES),
        AttributeDef("scenario", classes=SCENARIO_CLASSES),
    )
)


def scenario_group(scenario: str) -> str:
    for group, members in SCENARIO_GROUPS.items():
        if scenario in members:
            return group
    raise SchemaError("scenario", f"unknown scenario {scenario!r}")


def _check_enum(field_name: str, value: str, allowed: Sequence[str]) -> None:
    if value not in allowed:
        raise SchemaError(field_name, f"{value!r} not in {list(allowed)}")


def _check_range(field_name: str, value: float, lo: float, hi: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise SchemaError(field_name, f"expected a finite number, got {value!r}")
    if not lo <= value <= hi:
        raise SchemaError(field_name, f"{value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class ConditionRecord:
    """The six imaging-condition attributes of one image pair."""

    altitude_m: float
    angle_deg: float
    time: str
    weather: str
    illumination: str
    scenario: str

    def __post_init__(self) -> None:
        _check_range("altitude_m", self.altitude_m, *ALTITUDE_RANGE)
        _check_range("angle_deg", self.angle_deg, *ANGLE_RANGE)
        _check_enum("time", self.time, TIME_CLASSES)
        _check_enum("weather", self.weather, WEATHER_CLASSES)
        _check_enum("illumination", self.illumination, ILLUMINATION_CLASSES)
        _check_enum("scenario", self.scenario, SCENARIO_CLASSES)

    def value(self, attribute: str) -> float | str:
        """Raw value of ``attribute`` (schema name, e.g. ``"altitude"``)."""
        return {
            "altitude": self.altitude_m,
            "angle": self.angle_deg,
            "time": self.time,
            "weather": self.weather,
            "illumination": self.illumination,
            "scenario": self.scenario,
        }[attribute]

    def to_dict(self) -> dict:
        return {
            "altitude_m": float(self.altitude_m),
            "angle_deg": float(self.angle_deg),
            "time": self.time,
            "weather": self.weather,
            "illumination": self.illumination,
            "scenario": self.scenario,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConditionRecord:
        expected = {"altitude_m", "angle_deg", "time", "weather", "illumination", "scenario"}
        missing = expected - set(d)
        if missing:
            raise SchemaError(sorted(missing)[0], "missing")
        extra = set(d) - expected
        if extra:
            raise SchemaError(sorted(extra)[0], "unknown attribute")
        return cls(**{k: d[k] for k in expected})


def altitude_bucket(altitude_m: float) -> str:
    return ALTITUDE_BUCKETS[0] if altitude_m <= 120.0 else ALTITUDE_BUCKETS[1]


def angle_bucket(angle_deg: float) -> str:
    return ANGLE_BUCKETS[0] if angle_deg <= 30.0 else ANGLE_BUCKETS[1]


def bucketize(record: ConditionRecord) -> dict[str, str]:
    """Map a record to one label per attribute, numeric attributes as interval labels."""
    return {
        "altitude": altitude_bucket(record.altitude_m),
        "angle": angle_bucket(record.angle_deg),
        "time": record.time,
        "weather": record.weather,
        "illumination": record.illumination,
        "scenario": record.scenario,
    }


def normalize_theta(theta: float) -> float:
    """Wrap an angle into [-pi/2, pi/2); a rectangle is symmetric under a half turn."""
    t = math.fmod(theta + math.pi / 2, math.pi)
    if t < 0:
        t += math.pi
    t -= math.pi / 2
    if t >= math.pi / 2:
        t -= math.pi
    return t


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0
    class_id: int = 0

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise SchemaError("box", f"non-positive extent w={self.w} h={self.h}")
        if not 0 <= int(self.class_id) < len(CLASS_NAMES) or int(self.class_id) != self.class_id:
            raise SchemaError("class_id", f"{self.class_id} not in [0, {len(CLASS_NAMES) - 1}]")
        object.__setattr__(self, "theta", normalize_theta(float(self.theta)))

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def corners(self) -> np.ndarray:
        """Four corners, counter-clockwise in a y-up frame, shape (4, 2)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.array([-0.5, 0.5, 0.5, -0.5]) * self.w
        dy = np.array([-0.5, -0.5, 0.5, 0.5]) * self.h
        return np.stack([self.cx + c * dx - s * dy, self.cy + s * dx + c * dy], axis=1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=np.float64)

    def to_list(self) -> list:
        return [float(self.cx), float(self.cy), float(self.w), float(self.h), float(self.theta), int(self.class_id)]

    @classmethod
    def from_list(cls, v: Sequence) -> OrientedBox:
        if len(v) != 6:
            raise SchemaError("box", f"expected [cx, cy, w, h, theta, class_id], got {len(v)} values")
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), float(v[4]), int(v[5]))


def boxes_to_array(boxes: Iterable[OrientedBox]) -> np.ndarray:
    arr = [b.as_array() for b in boxes]
    return np.array(arr, dtype=np.float64).reshape(-1, 5)


@dataclass(frozen=True)
class AnnotationRecord:
    """One image pair as listed in an annotation file (rasters not loaded)."""

    record_id: str
    rgb_path: str
    ir_path: str
    condition: ConditionRecord
    rgb_boxes: tuple[OrientedBox, ...]
    ir_boxes: tuple[OrientedBox, ...]
    split: str
    image_size: tuple[int, int] = (640, 512)
    reliability: str | None = None
    scene_seed: int | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        _check_enum("split", self.split, SPLITS)
        if self.reliability is not None:
            _check_enum("reliability", self.reliability, RELIABILITY_TAGS)
        W, H = self.image_size
        for key in ("rgb_boxes", "ir_boxes"):
            for b in getattr(self, key):
                if not (0 <= b.cx <= W and 0 <= b.cy <= H):
                    raise SchemaError(key, f"box center ({b.cx}, {b.cy}) outside image {W}x{H}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    @property
    def rgb_file(self) -> Path:
        return self.resolve(self.rgb_path)

    @property
    def ir_file(self) -> Path:
        return self.resolve(self.ir_path)

    def load(self) -> ImagePairSample:
        from PIL import Image

        rgb = np.asarray(Image.open(self.rgb_file).convert("RGB"), dtype=np.uint8)
        ir = np.asarray(Image.open(self.ir_file).convert("L"), dtype=np.uint8)
        return ImagePairSample(rgb, ir, self.rgb_boxes, self.ir_boxes, self.condition, self.reliability, self.record_id)

    def to_dict(self) -> dict:
        d = {
            "record_id": self.record_id,
            "rgb_path": self.rgb_path,
            "ir_path": self.ir_path,
            "condition": self.condition.to_dict(),
            "rgb_boxes": [b.to_list() for b in self.rgb_boxes],
            "ir_boxes": [b.to_list() for b in self.ir_boxes],
            "split": self.split,
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
        }
        if self.reliability is not None:
            d["reliability"] = self.reliability
        if self.scene_seed is not None:
            d["scene_seed"] = int(self.scene_seed)
        return d


@dataclass(frozen=True)
class ImagePairSample:
    """Aligned rasters (uint8: RGB H x W x 3, IR H x W) with labels."""

    rgb: np.ndarray
    ir: np.ndarray
    rgb_boxes: tuple[OrientedBox, ...]
    ir_boxes: tuple[OrientedBox, ...]
    condition: ConditionRecord | None
    reliability: str | None = None
    record_id: str = ""


_RECORD_KEYS = {
    "record_id", "rgb_path", "ir_path", "condition", "rgb_boxes", "ir_boxes",
    "split", "image_size", "reliability", "scene_seed",
}


def parse_record(d: dict, line: int = 0, root: Path | None = None) -> AnnotationRecord:
    unknown = set(d) - _RECORD_KEYS
    if unknown:
        raise AnnotationError(line, sorted(unknown)[0], "unknown key")
    for key in ("record_id", "rgb_path", "ir_path", "condition", "split"):
        if key not in d:
            raise AnnotationError(line, key, "missing")
    try:
        condition = ConditionRecord.from_dict(d["condition"])
    except SchemaError as e:
        raise AnnotationError(line, e.field, str(e)) from e
    except TypeError as e:
        raise AnnotationError(line, "condition", str(e)) from e
    try:
        rgb_boxes = tuple(OrientedBox.from_list(b) for b in d.get("rgb_boxes", []))
        ir_boxes = tuple(OrientedBox.from_list(b) for b in d.get("ir_boxes", []))
        size = d.get("image_size", [640, 512])
        return AnnotationRecord(
            record_id=str(d["record_id"]),
            rgb_path=d["rgb_path"],
            ir_path=d["ir_path"],
            condition=condition,
            rgb_boxes=rgb_boxes,
            ir_boxes=ir_boxes,
            split=d["split"],
            image_size=(int(size[0]), int(size[1])),
            reliability=d.get("reliability"),
            scene_seed=d.get("scene_seed"),
            root=root,
        )
    except SchemaError as e:
        raise AnnotationError(line, e.field, str(e)) from e
    except (TypeError, ValueError) as e:
        raise AnnotationError(line, "boxes", str(e)) from e


def read_records(path: str | os.PathLike, check_paths: bool = True) -> list[AnnotationRecord]:
    """Parse every record of an annotation file, sorted by record id."""
    path = Path(path)
    override = os.environ.get(DATA_ROOT_ENV)
    root = Path(override) if override else path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as e:
                raise AnnotationError(lineno, "<json>", str(e)) from e
            if not isinstance(d, dict):
                raise AnnotationError(lineno, "<json>", "record is not an object")
            rec = parse_record(d, lineno, root)
            if check_paths:
                for key, p in (("rgb_path", rec.rgb_file), ("ir_path", rec.ir_file)):
                    if not p.exists():
                        raise AnnotationError(lineno, key, f"file not found: {p}")
            records.append(rec)
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise AnnotationError(0, "record_id", "duplicate record ids")
    return sorted(records, key=lambda r: r.record_id)


def load_dataset(path: str | os.PathLike, split: str | None = "train", check_paths: bool = True) -> list[AnnotationRecord]:
    """Load the records of one split (``None`` or ``"all"`` keeps everything)."""
    if split not in (None, "all") and split not in SPLITS:
        raise SchemaError("split", f"{split!r} not in {list(SPLITS)}")
    records = read_records(path, check_paths=check_paths)
    if split in (None, "all"):
        return records
    return [r for r in records if r.split == split]


def serialize_record(rec: AnnotationRecord) -> str:
    return json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":"))


def dump_records(records: Iterable[AnnotationRecord], path: str | os.PathLike) -> None:
    lines = [serialize_record(r) for r in sorted(records, key=lambda r: r.record_id)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def check_split_disjoint(records: Sequence[AnnotationRecord]) -> None:
    """Train and test must come from different scene seeds."""
    train = {r.scene_seed for r in records if r.split == "train" and r.scene_seed is not None}
    test = {r.scene_seed for r in records if r.split == "test" and r.scene_seed is not None}
    shared = train & test
    if shared:
        raise SchemaError("scene_seed", f"scene seeds shared by train and test: {sorted(shared)[:5]}")
