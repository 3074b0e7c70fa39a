"""Synthetic condition-controlled RGB-IR scenes and homography calibration.

Scenes are smooth textured backgrounds with a few rotated rectangles ("vehicles")
on them.  The imaging condition decides how each modality is corrupted, so the
modality that still carries the objects is known for every pair.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .schema import (
    ALTITUDE_RANGE,
    ANGLE_RANGE,
    ILLUMINATION_CLASSES,
    SCENARIO_CLASSES,
    TIME_CLASSES,
    WEATHER_CLASSES,
    AnnotationRecord,
    ConditionRecord,
    ImagePairSample,
    OrientedBox,
    dump_records,
)


class GenerationError(RuntimeError):
    pass


class HomographyError(ValueError):
    pass


# Long side in pixels at 150 m, and long/short aspect, per class id.
CLASS_LENGTH = (13.0, 12.0, 16.0, 20.0, 18.0, 17.0, 6.0, 20.0, 15.0, 18.0, 17.0)
CLASS_ASPECT = (1.0, 2.0, 3.2, 3.0, 2.4, 2.2, 2.0, 4.0, 1.6, 2.8, 2.6)
CLASS_RGB = (
    (0.95, 0.15, 0.10),
    (0.10, 0.85, 0.20),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.10, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.10, 0.95),
    (0.95, 0.95, 0.95),
    (0.50, 0.95, 0.10),
    (0.10, 0.50, 0.95),
)
CLASS_IR = (0.85, 0.80, 0.95, 0.90, 0.82, 0.88, 0.92, 0.78, 0.86, 0.84, 0.93)

# Reliability scores closer than this fraction of the larger one are "balanced".
BALANCED_MARGIN = 0.10


@dataclass(frozen=True)
class ModalityDegradation:
    gain: float = 1.0
    clip: bool = False
    noise: float = 0.0
    blur: float = 0.0
    contrast: float = 1.0
    speckle: float = 0.0
    streaks: float = 0.0

    @property
    def score(self) -> float:
        """Scalar corruption score; 0 for a clean modality."""
        return (
            abs(math.log(self.gain))
            + (0.5 if self.clip else 0.0)
            + 5.0 * self.noise
            + 0.5 * self.blur
            + 2.0 * (1.0 - self.contrast)
            + 10.0 * self.speckle
            + 5.0 * self.streaks
        )


@dataclass(frozen=True)
class DegradationProfile:
    rgb: ModalityDegradation
    ir: ModalityDegradation

    @property
    def reliability(self) -> str:
        return reliability_tag(self.rgb.score, self.ir.score)


def reliability_tag(rgb_score: float, ir_score: float) -> str:
    hi = max(rgb_score, ir_score)
    if hi == 0.0 or abs(rgb_score - ir_score) <= BALANCED_MARGIN * hi:
        return "balanced"
    return "rgb" if rgb_score < ir_score else "ir"


_ILLUMINATION_RGB = {
    "Overexposure": dict(gain=2.5, clip=True),
    "Normal": dict(),
    "Dim": dict(gain=0.5),
    "Twilight": dict(gain=0.35),
    "NearNight": dict(gain=0.2, noise=0.05),
    "Night": dict(gain=0.05, noise=0.30),
}
RGB_NOISE_MAX = 0.30
_IR_CONTRAST_BY_TIME = {"Noon": 0.03}
_IR_NOISE_BY_TIME = {"Noon": 0.10}


def degradation_profile(condition: ConditionRecord) -> DegradationProfile:
    """Per-modality corruption parameters; a pure function of the condition."""
    rgb = dict(_ILLUMINATION_RGB[condition.illumination])
    ir: dict = {}
    w = condition.weather
    if w == "Night":
        night = _ILLUMINATION_RGB["Night"]
        rgb["gain"] = min(rgb.get("gain", 1.0), night["gain"])
        rgb["noise"] = max(rgb.get("noise", 0.0), night["noise"])
        rgb["clip"] = False
    elif w == "Foggy":
        for d in (rgb, ir):
            d["blur"] = 1.5
            d["contrast"] = d.get("contrast", 1.0) * 0.5
    elif w == "Snowy":
        rgb["speckle"] = 0.04
    elif w == "Rainy":
        rgb["streaks"] = 0.08
    t = condition.time
    if t in _IR_CONTRAST_BY_TIME:
        ir["contrast"] = ir.get("contrast", 1.0) * _IR_CONTRAST_BY_TIME[t]
        ir["noise"] = max(ir.get("noise", 0.0), _IR_NOISE_BY_TIME[t])
    return DegradationProfile(ModalityDegradation(**rgb), ModalityDegradation(**ir))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    condition: ConditionRecord
    image_size: tuple[int, int] = (64, 64)
    object_count: int = 2
    num_classes: int = 3
    class_weights: tuple[float, ...] | None = None
    max_rotation_deg: float = 12.0
    min_center_distance: float = 12.0
    max_overlap: float = 0.0
    max_retries: int = 200
    misalign_px: float = 0.0

    @property
    def degradation(self) -> DegradationProfile:
        return degradation_profile(self.condition)


@dataclass(frozen=True)
class Calibration:
    """Point correspondences from the (misaligned) IR frame to the RGB frame."""

    ir_points: np.ndarray
    rgb_points: np.ndarray
    true_homography: np.ndarray


@dataclass(frozen=True)
class GeneratedPair:
    sample: ImagePairSample
    profile: DegradationProfile
    calibration: Calibration | None = None

    @property
    def reliability(self) -> str:
        return self.profile.reliability


def long_tail_weights(num_classes: int, ratio: float = 0.55) -> np.ndarray:
    """Car-first long-tail class distribution, strictly decreasing."""
    w = ratio ** np.arange(num_classes, dtype=np.float64)
    return w / w.sum()


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream]))


def _smooth_field(rng: np.random.Generator, H: int, W: int, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [0, 1]."""
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _coverage(box: OrientedBox, H: int, W: int, ss: int = 3) -> np.ndarray:
    """Fraction of each pixel covered by the box (ss x ss supersampling)."""
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = xs[None, :] - box.cx
    dy = ys[:, None] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)
    return inside.reshape(H, ss, W, ss).mean(axis=(1, 3))


def _object_scale(altitude_m: float) -> float:
    return (150.0 / altitude_m) ** 0.6


def _foreshortening(angle_deg: float) -> float:
    return 1.0 - 0.35 * angle_deg / ANGLE_RANGE[1]


def _iou_any(box: OrientedBox, others: Sequence[OrientedBox]) -> float:
    from .geometry import rotated_iou

    return max((rotated_iou(box.as_array(), o.as_array()) for o in others), default=0.0)


def place_objects(spec: SceneSpec, rng: np.random.Generator) -> list[OrientedBox]:
    W, H = spec.image_size
    weights = np.asarray(spec.class_weights if spec.class_weights is not None else long_tail_weights(spec.num_classes))
    weights = weights / weights.sum()
    scale = _object_scale(spec.condition.altitude_m)
    fore = _foreshortening(spec.condition.angle_deg)
    boxes: list[OrientedBox] = []
    for _ in range(spec.object_count):
        cls = int(rng.choice(len(weights), p=weights))
        length = CLASS_LENGTH[cls] * scale * rng.uniform(0.9, 1.1)
        width = length / CLASS_ASPECT[cls] * fore
        theta = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        for _attempt in range(spec.max_retries):
            margin = 0.5 * length + 1.0
            if W - 2 * margin <= 0 or H - 2 * margin <= 0:
                raise GenerationError(f"object of length {length:.1f}px does not fit a {W}x{H} image")
            cx = rng.uniform(margin, W - margin)
            cy = rng.uniform(margin, H - margin)
            cand = OrientedBox(cx, cy, length, max(width, 2.0), theta, cls)
            if any(math.hypot(cx - b.cx, cy - b.cy) < spec.min_center_distance for b in boxes):
                continue
            if boxes and _iou_any(cand, boxes) > spec.max_overlap:
                continue
            if not spec.max_overlap and boxes and _overlaps(cand, boxes):
                continue
            boxes.append(cand)
            break
        else:
            raise GenerationError(
                f"could not place object {len(boxes) + 1}/{spec.object_count} within overlap budget "
                f"after {spec.max_retries} retries"
            )
    return boxes


def _overlaps(box: OrientedBox, others: Sequence[OrientedBox]) -> bool:
    from .geometry import rotated_iou

    return any(rotated_iou(box.as_array(), o.as_array()) > 0.0 for o in others)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    r = max(1, int(math.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    pad = [(r, r), (r, r)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    H, W = img.shape[:2]
    for i, kv in enumerate(k):
        out += kv * p[i : i + H, r : r + W]
    p = np.pad(out, pad, mode="reflect")
    out2 = np.zeros_like(img)
    for i, kv in enumerate(k):
        out2 += kv * p[r : r + H, i : i + W]
    return out2


def _degrade(img: np.ndarray, d: ModalityDegradation, rng: np.random.Generator) -> np.ndarray:
    x = img
    if d.blur:
        x = _gaussian_blur(x, d.blur)
    if d.contrast != 1.0:
        m = x.mean(axis=(0, 1), keepdims=True)
        x = m + d.contrast * (x - m)
    x = x * d.gain
    if d.clip:
        x = np.clip(x, 0.0, 1.0)
    if d.noise:
        x = x + rng.normal(0.0, d.noise, size=x.shape)
    if d.speckle:
        mask = rng.random(x.shape[:2]) < d.speckle
        x = np.where(mask[..., None] if x.ndim == 3 else mask, 1.0, x)
    if d.streaks:
        H, W = x.shape[:2]
        n = max(1, int(d.streaks * W))
        cols = rng.integers(0, W, size=n)
        streak = np.zeros((H, W))
        for c in cols:
            y0 = int(rng.integers(0, H))
            streak[y0 : y0 + H // 3, c] = 0.6
        x = x + (streak[..., None] if x.ndim == 3 else streak)
    return np.clip(x, 0.0, 1.0)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_clean(spec: SceneSpec, boxes: Sequence[OrientedBox], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    W, H = spec.image_size
    tex = _smooth_field(rng, H, W)
    tint = rng.uniform(-0.04, 0.04, size=3)
    rgb = (0.22 + 0.16 * tex)[..., None] + tint[None, None, :]
    ir = 0.30 + 0.12 * _smooth_field(rng, H, W)
    for b in boxes:
        cov = _coverage(b, H, W)
        color = np.asarray(CLASS_RGB[b.class_id])
        rgb = rgb * (1 - cov[..., None]) + color[None, None, :] * cov[..., None]
        ir = ir * (1 - cov) + CLASS_IR[b.class_id] * cov
    return np.clip(rgb, 0, 1), np.clip(ir, 0, 1)


def generate_pair(spec: SceneSpec) -> GeneratedPair:
    """Render one aligned pair; identical ``spec`` gives bit-identical rasters."""
    W, H = spec.image_size
    if W < 32 or H < 32:
        raise GenerationError(f"image size {W}x{H} below 32x32")
    if spec.object_count < 0:
        raise GenerationError("object_count must be >= 0")
    boxes = place_objects(spec, _rng(spec.seed, 0))
    rgb, ir = render_clean(spec, boxes, _rng(spec.seed, 1))
    profile = spec.degradation
    rgb = _degrade(rgb, profile.rgb, _rng(spec.seed, 2))
    ir = _degrade(ir, profile.ir, _rng(spec.seed, 3))
    rgb8, ir8 = _to_u8(rgb), _to_u8(ir)
    calibration = None
    if spec.misalign_px > 0:
        ir8, calibration = _misalign(ir8, spec.misalign_px, _rng(spec.seed, 4))
    sample = ImagePairSample(
        rgb=rgb8,
        ir=ir8,
        rgb_boxes=tuple(boxes),
        ir_boxes=tuple(boxes),
        condition=spec.condition,
        reliability=profile.reliability,
        record_id=f"{spec.seed:08d}",
    )
    return GeneratedPair(sample, profile, calibration)


# --- homography ----------------------------------------------------------------


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray
    rms: float = 0.0

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-15:
            raise HomographyError("bottom-right entry is zero; cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise HomographyError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply_homography(self.matrix, points)

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.matrix))


def apply_homography(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(m).T
    return h[:, :2] / h[:, 2:3]


def _hartley(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    if d < 1e-15:
        raise HomographyError("points are coincident")
    s = math.sqrt(2.0) / d
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return apply_homography(T, points), T


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(pts)
    scale = max(np.ptp(pts, axis=0).max(), 1.0) ** 2
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if abs(cross) <= tol * scale:
                    return True
    return False


def estimate_homography(src_points: np.ndarray, dst_points: np.ndarray) -> Homography:
    """Normalized DLT least-squares fit of ``dst ~ H src``."""
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise HomographyError(f"point count mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 4:
        raise HomographyError(f"need at least 4 correspondences, got {len(src)}")
    if len(src) == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise HomographyError("degenerate configuration: three collinear points")
    ns, Ts = _hartley(src)
    nd, Td = _hartley(dst)
    rows = []
    for (x, y), (u, v) in zip(ns, nd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    A = np.asarray(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= 1e-10 * s[0]:
        raise HomographyError("degenerate configuration: rank-deficient system")
    Hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(Td) @ Hn @ Ts
    if abs(m[2, 2]) < 1e-15:
        raise HomographyError("estimated homography maps to infinity")
    m = m / m[2, 2]
    rms = float(np.sqrt(((apply_homography(m, src) - dst) ** 2).sum(axis=1).mean()))
    return Homography(m, rms)


def warp_and_crop(image: np.ndarray, h: Homography | np.ndarray, crop: tuple[int, int, int, int]) -> np.ndarray:
    """Resample ``image`` into the destination frame of ``h`` and cut ``crop``.

    ``crop`` is ``(x0, y0, width, height)`` in destination pixels.  Pixel (i, j)
    has its center at (j + 0.5, i + 0.5).  Samples falling outside the source are 0.
    """
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    x0, y0, cw, ch = (int(v) for v in crop)
    if cw <= 0 or ch <= 0:
        raise ValueError(f"empty crop {crop}")
    src = np.asarray(image)
    Hs, Ws = src.shape[:2]
    corners = apply_homography(m, np.array([[0, 0], [Ws, 0], [Ws, Hs], [0, Hs]], dtype=np.float64))
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    if x0 >= hi[0] or y0 >= hi[1] or x0 + cw <= lo[0] or y0 + ch <= lo[1]:
        raise ValueError(f"crop {crop} lies outside the warped image bounds")
    inv = np.linalg.inv(m)
    uu, vv = np.meshgrid(np.arange(cw) + x0 + 0.5, np.arange(ch) + y0 + 0.5)
    pts = apply_homography(inv, np.stack([uu.ravel(), vv.ravel()], axis=1))
    sx = pts[:, 0] - 0.5
    sy = pts[:, 1] - 0.5
    fx0 = np.floor(sx).astype(np.int64)
    fy0 = np.floor(sy).astype(np.int64)
    ax = sx - fx0
    ay = sy - fy0
    data = src.astype(np.float64)
    if data.ndim == 2:
        data = data[..., None]
    out = np.zeros((len(sx), data.shape[2]))
    # Taps outside the source contribute 0; a sample that sits exactly on the
    # source grid is unaffected by its zero-weight neighbours.
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            xi = fx0 + dx
            yi = fy0 + dy
            ok = (xi >= 0) & (xi < Ws) & (yi >= 0) & (yi < Hs)
            wgt = np.where(ok, wx * wy, 0.0)
            vals = data[np.clip(yi, 0, Hs - 1), np.clip(xi, 0, Ws - 1)]
            out += wgt[:, None] * vals
    inside = (sx >= -0.5) & (sx <= Ws - 0.5) & (sy >= -0.5) & (sy <= Hs - 0.5)
    out[~inside] = 0.0
    out = out.reshape(ch, cw, -1)
    if src.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        out = np.clip(np.round(out), info.min, info.max).astype(src.dtype)
    return out


def random_homography(rng: np.random.Generator, size: tuple[int, int], max_shift: float) -> np.ndarray:
    """A mild perspective perturbation moving each image corner by <= ``max_shift`` px."""
    W, H = size
    corners = np.array([[0, 0], [W, 0], [W, H], [0, H]], dtype=np.float64)
    moved = corners + rng.uniform(-max_shift, max_shift, size=corners.shape)
    return estimate_homography(corners, moved).matrix


def _misalign(ir: np.ndarray, max_shift: float, rng: np.random.Generator) -> tuple[np.ndarray, Calibration]:
    H, W = ir.shape[:2]
    m = random_homography(rng, (W, H), max_shift)
    warped = warp_and_crop(ir, Homography(m), (0, 0, W, H))
    # Landmarks inset from the border, seen in both frames.
    grid = np.array([[x, y] for x in (0.2 * W, 0.5 * W, 0.8 * W) for y in (0.2 * H, 0.5 * H, 0.8 * H)])
    return warped, Calibration(ir_points=apply_homography(m, grid), rgb_points=grid, true_homography=m)


def align_ir(ir: np.ndarray, calibration: Calibration) -> tuple[np.ndarray, Homography]:
    """Undo an injected misalignment from the recorded correspondences."""
    h = estimate_homography(calibration.ir_points, calibration.rgb_points)
    H, W = ir.shape[:2]
    return warp_and_crop(ir, h, (0, 0, W, H)), h


# --- corpus --------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "Night": {"illumination": "Night", "time": "Night", "weather": "Night"},
    "Overexposure+Noon": {"illumination": "Overexposure", "time": "Noon", "weather": "Sunny"},
    "Normal": {"illumination": "Normal", "time": ["Morning", "Afternoon"], "weather": ["Sunny", "Cloudy"]},
}
DEFAULT_MIX = {"Night": 1 / 3, "Overexposure+Noon": 1 / 3, "Normal": 1 / 3}

_CATEGORICAL = {
    "time": TIME_CLASSES,
    "weather": WEATHER_CLASSES,
    "illumination": ILLUMINATION_CLASSES,
    "scenario": SCENARIO_CLASSES,
}


def resolve_profile(key: str) -> dict:
    """Turn a mix key into attribute constraints.

    Accepts a preset name (``"Night"``), a bare class name that belongs to exactly
    one attribute (``"Snowy"``), or ``"attr=value,attr=value"`` clauses.
    """
    if key in PRESETS:
        return dict(PRESETS[key])
    if "=" in key:
        out: dict = {}
        for clause in key.split(","):
            attr, _, value = clause.partition("=")
            attr, value = attr.strip(), value.strip()
            if attr in ("altitude_m", "angle_deg"):
                lo, _, hi = value.partition(":")
                out[attr] = [float(lo), float(hi or lo)]
            elif attr in _CATEGORICAL:
                if value not in _CATEGORICAL[attr]:
                    raise ValueError(f"mix key {key!r}: {value!r} is not a {attr} class")
                out[attr] = value
            else:
                raise ValueError(f"mix key {key!r}: unknown attribute {attr!r}")
        return out
    owners = [a for a, classes in _CATEGORICAL.items() if key in classes]
    if len(owners) == 1:
        return {owners[0]: key}
    raise ValueError(f"cannot resolve condition mix key {key!r}")


def sample_condition(constraints: Mapping, rng: np.random.Generator) -> ConditionRecord:
    vals = {}
    for attr, rng_default in (("altitude_m", ALTITUDE_RANGE), ("angle_deg", ANGLE_RANGE)):
        lo, hi = constraints.get(attr, rng_default)
        vals[attr] = round(float(rng.uniform(lo, hi)), 3)
    for attr, classes in _CATEGORICAL.items():
        choice = constraints.get(attr, classes)
        if isinstance(choice, str):
            vals[attr] = choice
        else:
            vals[attr] = str(choice[int(rng.integers(len(choice)))])
    return ConditionRecord(**vals)


def normalize_mix(mix: Mapping[str, float]) -> list[tuple[str, float]]:
    items = sorted(mix.items())
    if not items:
        raise ValueError("empty condition mix")
    total = sum(w for _, w in items)
    if any(w < 0 for _, w in items) or abs(total - 1.0) > 1e-6:
        raise ValueError(f"condition mix weights must be non-negative and sum to 1 (got {total})")
    for k, _ in items:
        resolve_profile(k)
    return items


@dataclass(frozen=True)
class CorpusConfig:
    count: int
    seed: int = 0
    mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 3
    test_fraction: float = 0.2
    min_objects: int = 1
    max_objects: int = 4
    long_tail_ratio: float = 0.55
    max_rotation_deg: float = 12.0

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "seed": self.seed,
            "mix": dict(sorted(self.mix.items())),
            "image_size": list(self.image_size),
            "num_classes": self.num_classes,
            "test_fraction": self.test_fraction,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "long_tail_ratio": self.long_tail_ratio,
            "max_rotation_deg": self.max_rotation_deg,
        }


# Scene seeds: train pairs use [base, base + n_train), test pairs start at
# base + TEST_SEED_OFFSET, so no scene is ever shared across the split.
TEST_SEED_OFFSET = 1 << 24


def scene_seeds(cfg: CorpusConfig) -> list[tuple[int, str]]:
    n_test = int(round(cfg.count * cfg.test_fraction))
    n_train = cfg.count - n_test
    base = (cfg.seed * 7919) << 26
    return [(base + i, "train") for i in range(n_train)] + [
        (base + TEST_SEED_OFFSET + j, "test") for j in range(n_test)
    ]


def corpus_scene_spec(cfg: CorpusConfig, scene_seed: int, profiles: list[tuple[str, float]]) -> SceneSpec:
    rng = _rng(scene_seed, 9)
    keys = [k for k, _ in profiles]
    weights = np.array([w for _, w in profiles])
    key = keys[int(rng.choice(len(keys), p=weights / weights.sum()))]
    cond = sample_condition(resolve_profile(key), rng)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    return SceneSpec(
        seed=scene_seed,
        condition=cond,
        image_size=tuple(cfg.image_size),
        object_count=n_obj,
        num_classes=cfg.num_classes,
        class_weights=tuple(long_tail_weights(cfg.num_classes, cfg.long_tail_ratio)),
        max_rotation_deg=cfg.max_rotation_deg,
    )


def generate_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike) -> Path:
    """Write rasters and ``annotations.jsonl`` under ``out_dir``; returns the file path."""
    from PIL import Image

    if cfg.count <= 0:
        raise ValueError("count must be > 0")
    profiles = normalize_mix(cfg.mix)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise GenerationError(f"output directory not writable: {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise GenerationError(f"output directory not writable: {out}")
    records = []
    for idx, (scene_seed, split) in enumerate(scene_seeds(cfg)):
        spec = corpus_scene_spec(cfg, scene_seed, profiles)
        pair = generate_pair(spec)
        rid = f"{idx:06d}"
        rgb_rel = f"images/{rid}_rgb.png"
        ir_rel = f"images/{rid}_ir.png"
        Image.fromarray(pair.sample.rgb, mode="RGB").save(out / rgb_rel, optimize=False)
        Image.fromarray(pair.sample.ir, mode="L").save(out / ir_rel, optimize=False)
        records.append(
            AnnotationRecord(
                record_id=rid,
                rgb_path=rgb_rel,
                ir_path=ir_rel,
                condition=spec.condition,
                rgb_boxes=pair.sample.rgb_boxes,
                ir_boxes=pair.sample.ir_boxes,
                split=split,
                image_size=tuple(cfg.image_size),
                reliability=pair.reliability,
                scene_seed=scene_seed,
            )
        )
    ann = out / "annotations.jsonl"
    dump_records(records, ann)
    with open(out / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "digest": corpus_digest(ann)}, fh, indent=2, sort_keys=True)
    return ann


def corpus_digest(annotation_file: str | os.PathLike) -> str:
    """SHA-256 over the annotation file and every raster it references, in record order."""
    from .schema import read_records

    h = hashlib.sha256()
    p = Path(annotation_file)
    h.update(p.read_bytes())
    for rec in read_records(p, check_paths=False):
        r = replace(rec, root=p.parent)
        h.update(r.rgb_file.read_bytes())
        h.update(r.ir_file.read_bytes())
    return h.hexdigest()
