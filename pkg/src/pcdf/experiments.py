"""Desk-scale experiments: fusion variants, ablations, and modality-weight probes.

Every variant trains on the same synthetic corpus with the same schedule and
is scored by mAP@0.5 on the corpus test split.  Results are reported as the
median over seeds.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import RunConfig, build_config
from .detect import load_samples, modality_weights, predict_samples, train_two_stage
from .evaluation import evaluate
from .prompt import invocation_count
from .schema import ImagePairSample, load_dataset
from .synthgen import CorpusConfig, corpus_digest, generate_corpus

# Overrides applied on top of the desk profile.
VARIANTS: dict[str, dict] = {
    "pcdf": {},
    "w/o SCPT": {"ablate": {"scpt": True}},
    "w/o SCPL": {"ablate": {"scpl": True}},
    "w/o L_dt": {"ablate": {"l_dt": True}},
    "w/o L_irr": {"ablate": {"l_irr": True}},
    "w/o L_dc": {"ablate": {"l_dc": True}},
    "w/o PCD": {"ablate": {"pcd": True}},
    "w/o CDF (add)": {"fusion": {"mode": "add"}},
    "w/o CDF (concat)": {"fusion": {"mode": "concat"}},
    "rgb only": {"detector": {"modality": "rgb"}},
    "ir only": {"detector": {"modality": "ir"}},
}
ABLATIONS = tuple(k for k in VARIANTS if k.startswith("w/o"))
BASELINES = ("rgb only", "ir only")
DEFAULT_SEEDS = (0, 1, 2)


def is_night(s: ImagePairSample) -> bool:
    return s.condition is not None and s.condition.illumination == "Night"


def is_overexposed_crossover(s: ImagePairSample) -> bool:
    return s.condition is not None and s.condition.illumination == "Overexposure" and s.condition.time == "Noon"


PROBE_SUBSETS: dict[str, Callable[[ImagePairSample], bool]] = {
    "night": is_night,
    "overexposure+noon": is_overexposed_crossover,
}


@dataclass
class Corpus:
    annotation_file: Path
    train: list[ImagePairSample]
    test: list[ImagePairSample]
    digest: str


def desk_corpus(out_dir: str | Path, count: int = 500, seed: int = 0, image_size=(64, 64), num_classes: int = 3) -> Corpus:
    """Generate (or reuse, if its config matches) the synthetic desk corpus under ``out_dir``."""
    cfg = CorpusConfig(count=count, seed=seed, image_size=tuple(image_size), num_classes=num_classes)
    out = Path(out_dir)
    meta = out / "corpus.json"
    ann = out / "annotations.jsonl"
    reuse = False
    if meta.is_file() and ann.is_file():
        stored = json.loads(meta.read_text())
        reuse = stored.get("config") == cfg.to_dict() and stored.get("digest") == corpus_digest(ann)
    if not reuse:
        ann = generate_corpus(cfg, out)
    return Corpus(
        ann,
        load_samples(load_dataset(ann, "train")),
        load_samples(load_dataset(ann, "test")),
        corpus_digest(ann),
    )


@dataclass
class VariantResult:
    variant: str
    seed: int
    map50: float
    per_class_ap: dict
    log_digest: str
    weight_gap: dict = field(default_factory=dict)  # subset -> mean(w_ir - w_rgb)
    prompt_calls_at_eval: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def variant_config(variant: str, seed: int, base: Mapping | None = None) -> RunConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    over = {"profile": "desk", "seed": seed}
    layer = dict(base or {})
    for section, values in VARIANTS[variant].items():
        merged = dict(layer.get(section, {}))
        merged.update(values)
        layer[section] = merged
    over.update(layer)
    return build_config(over)


def run_variant(variant: str, seed: int, corpus: Corpus, base: Mapping | None = None, out_dir: str | Path | None = None) -> VariantResult:
    cfg = variant_config(variant, seed, base)
    res = train_two_stage(cfg, corpus.train, out_dir=out_dir)
    before = invocation_count()
    dets = predict_samples(res.model, corpus.test, score_thresh=cfg.eval.score_thresh)
    calls = invocation_count() - before
    aps, m, _ = evaluate(dets, [s.ir_boxes for s in corpus.test], cfg.detector.num_classes, cfg.eval.iou_thresh)
    gaps = {}
    if res.model.use_prompt and res.model.fusion.mode == "pcdf":
        for name, pred in PROBE_SUBSETS.items():
            subset = [s for s in corpus.test if pred(s)]
            if subset:
                w = modality_weights(res.model, subset)
                gaps[name] = float(np.mean(w[:, 1] - w[:, 0]))
    return VariantResult(variant, seed, float(m if m is not None else 0.0), aps, res.log_digest, gaps, calls)


@dataclass
class SuiteResult:
    runs: list[VariantResult]

    def by_variant(self) -> dict[str, list[VariantResult]]:
        out: dict[str, list[VariantResult]] = {}
        for r in self.runs:
            out.setdefault(r.variant, []).append(r)
        return out

    def median_map(self, variant: str) -> float:
        return statistics.median(r.map50 for r in self.by_variant()[variant])

    def median_gap(self, variant: str, subset: str) -> float:
        return statistics.median(r.weight_gap[subset] for r in self.by_variant()[variant])

    def table(self) -> str:
        lines = [f"{'variant':<18} {'median mAP':>10}  per-seed"]
        for v, rs in self.by_variant().items():
            seeds = " ".join(f"{100 * r.map50:5.1f}" for r in rs)
            lines.append(f"{v:<18} {100 * self.median_map(v):10.1f}  {seeds}")
        return "\n".join(lines)


def run_suite(
    variants: Sequence[str],
    corpus: Corpus,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    base: Mapping | None = None,
    progress: Callable[[VariantResult], None] | None = None,
) -> SuiteResult:
    runs = []
    for v in variants:
        for s in seeds:
            r = run_variant(v, s, corpus, base)
            runs.append(r)
            if progress is not None:
                progress(r)
    return SuiteResult(runs)
