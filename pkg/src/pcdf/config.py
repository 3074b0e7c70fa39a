"""Run configuration.

A config file is YAML with one mapping per section::

    seed: 0
    output_dir: runs/exp1
    data: corpus/annotations.jsonl
    prompt: {tau: 0.15}
    loss: {lambda1: 0.01, lambda2: 0.003, lambda3: 0.01, cmd_order: 5}
    fusion: {mode: pcdf}
    ablate: {l_irr: true}
    detector: {epochs: 12, batch_size: 16}

Precedence, lowest first: dataclass defaults, the desk profile (when
``profile: desk``), the config file, then command-line flags.  Unknown keys are
rejected at every level.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .prompt import DEFAULT_PREFIXES, DEFAULT_SUBJECT, DEFAULT_TAU


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    count: int = 500
    seed: int = 0
    mix: dict = field(default_factory=lambda: {"Night": 1 / 3, "Overexposure+Noon": 1 / 3, "Normal": 1 / 3})
    image_size: tuple = (64, 64)
    num_classes: int = 3
    test_fraction: float = 0.2
    min_objects: int = 1
    max_objects: int = 4
    long_tail_ratio: float = 0.55
    max_rotation_deg: float = 12.0


@dataclass
class TemplateSection:
    subject: str = DEFAULT_SUBJECT
    prefixes: tuple = DEFAULT_PREFIXES


@dataclass
class PromptSection:
    template: TemplateSection = field(default_factory=TemplateSection)
    tau: float = DEFAULT_TAU
    hidden: int = 64
    embed_dim: int = 512


@dataclass
class LossSection:
    lambda1: float = 0.01
    lambda2: float = 0.003
    lambda3: float = 0.01
    cmd_order: int = 5
    det_weight: float = 1.0
    dec_weight: float = 1.0


@dataclass
class FusionSection:
    mode: str = "pcdf"
    hidden: int = 128


@dataclass
class AblateSection:
    """``True`` removes the named component."""

    scpt: bool = False
    scpl: bool = False
    l_dt: bool = False
    l_irr: bool = False
    l_dc: bool = False
    pcd: bool = False

    def active(self) -> list[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass
class DetectorSection:
    image_size: tuple = (640, 512)
    channels: int = 64
    num_classes: int = 11
    stride: int = 8
    head_hidden: int = 64
    modality: str = "both"
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    lr_decay: float = 0.95
    epochs: int = 50
    batch_size: int = 16
    min_distill_batch: int = 4
    grad_clip: float = 1.0
    gate_lr_mult: float = 1.0
    warmup_epochs: float = 1.0
    ema_decay: float = 0.98


@dataclass
class EvalSection:
    iou_thresh: float = 0.5
    score_thresh: float = 0.001
    nms_iou: float = 0.5
    max_dets: int = 100
    display_thresh: float = 0.25


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: str | None = None
    profile: str = "paper"
    synthgen: SynthSection = field(default_factory=SynthSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    loss: LossSection = field(default_factory=LossSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


# Desk scale: 64x64 synthetic pairs, 3 classes, short schedule.  Learning rate is
# raised from 0.01 because training runs for minutes instead of hours.
DESK_PROFILE: dict = {
    "detector": {
        "image_size": (64, 64),
        "channels": 32,
        "num_classes": 3,
        "head_hidden": 64,
        "epochs": 12,
        "batch_size": 16,
        "lr": 0.05,
        "lr_decay": 0.95,
    },
}


def _plain(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(current: Any, value: Any, where: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _merge(obj: Any, overrides: Mapping, where: str = "") -> None:
    if not isinstance(overrides, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(overrides).__name__}")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, path)
        elif isinstance(current, dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path}: expected a mapping")
            setattr(obj, key, dict(value))
        elif current is None:
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(current, value, path))


def build_config(file_data: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    cfg = RunConfig()
    layers = [file_data or {}, overrides or {}]
    profile = next((layer["profile"] for layer in reversed(layers) if "profile" in layer), cfg.profile)
    if profile == "desk":
        _merge(cfg, DESK_PROFILE)
    elif profile != "paper":
        raise ConfigError(f"unknown profile {profile!r}; expected 'paper' or 'desk'")
    for layer in layers:
        _merge(cfg, layer)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    return build_config(data, overrides)


def validate(cfg: RunConfig) -> None:
    from .fusion import FUSION_MODES

    if cfg.fusion.mode not in FUSION_MODES:
        raise ConfigError(f"fusion.mode must be one of {FUSION_MODES}, got {cfg.fusion.mode!r}")
    if cfg.detector.modality not in ("both", "rgb", "ir"):
        raise ConfigError(f"detector.modality must be both, rgb or ir, got {cfg.detector.modality!r}")
    for name in ("lambda1", "lambda2", "lambda3"):
        if getattr(cfg.loss, name) < 0:
            raise ConfigError(f"loss.{name} must be non-negative")
    if cfg.loss.cmd_order < 2:
        raise ConfigError("loss.cmd_order must be >= 2")
    if len(cfg.prompt.template.prefixes) != 6:
        raise ConfigError("prompt.template.prefixes must list one prefix per condition attribute (6)")
    if not 0 <= cfg.prompt.tau <= 1:
        raise ConfigError("prompt.tau must lie in [0, 1]")
    if cfg.detector.stride != 8:
        raise ConfigError("detector.stride is fixed at 8 by the backbone")
    if not 0 <= cfg.detector.ema_decay < 1:
        raise ConfigError("detector.ema_decay must lie in [0, 1)")
    if cfg.detector.warmup_epochs < 0:
        raise ConfigError("detector.warmup_epochs must be >= 0")
    if cfg.detector.batch_size < 1 or cfg.detector.epochs < 0:
        raise ConfigError("detector.batch_size must be >= 1 and detector.epochs >= 0")
