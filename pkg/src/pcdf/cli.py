"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
Relative output paths are resolved under ``$PCDF_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

OUTPUT_ROOT_ENV = "PCDF_OUTPUT_ROOT"
ABLATION_FLAGS = ("scpt", "scpl", "l_dt", "l_irr", "l_dc", "pcd")


class CliError(RuntimeError):
    pass


def output_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _parse_set(items: Sequence[str]) -> dict:
    """``a.b=value`` pairs into a nested mapping; values are parsed as YAML scalars."""
    import yaml

    out: dict = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _ablation_overrides(spec: str | None) -> dict:
    if not spec:
        return {}
    flags = [f.strip().lower().replace("-", "_") for f in spec.split(",") if f.strip()]
    bad = [f for f in flags if f not in ABLATION_FLAGS]
    if bad:
        raise CliError(f"unknown ablation flag(s) {bad}; expected a comma list of {list(ABLATION_FLAGS)}")
    return {"ablate": {f: True for f in flags}}


def _write_resolved(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.yaml")
    (out_dir / "seed.txt").write_text(f"{cfg.seed}\n")


# -- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    import yaml

    from .synthgen import DEFAULT_MIX, CorpusConfig, corpus_digest, generate_corpus, normalize_mix

    mix = dict(DEFAULT_MIX)
    if args.mix:
        p = Path(args.mix)
        if p.is_file():
            mix = yaml.safe_load(p.read_text())
        else:
            mix = {k.strip(): 1.0 for k in args.mix.split(";") if k.strip()}
            total = sum(mix.values())
            mix = {k: v / total for k, v in mix.items()}
        if not isinstance(mix, dict):
            raise CliError(f"--mix must name a mapping of condition preset -> weight, got {mix!r}")
    cfg = CorpusConfig(
        count=args.count,
        seed=args.seed,
        mix=mix,
        image_size=(args.size, args.size),
        num_classes=args.classes,
        test_fraction=args.test_fraction,
    )
    try:
        normalize_mix(cfg.mix)
    except ValueError as e:
        raise CliError(f"--mix: {e}") from e
    out = output_path(args.out)
    ann = generate_corpus(cfg, out)
    print(f"wrote {cfg.count} pairs to {ann} (digest {corpus_digest(ann)[:16]})")
    return 0


def _load_cfg(args, extra: dict | None = None):
    from .config import load_config

    over: dict = {}
    if getattr(args, "profile", None):
        over["profile"] = args.profile
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "data", None):
        over["data"] = str(args.data)
    _deep_update(over, _ablation_overrides(getattr(args, "ablate", None)))
    _deep_update(over, _parse_set(getattr(args, "set", None) or []))
    if extra:
        _deep_update(over, extra)
    return load_config(args.config, over)


def cmd_train(args) -> int:
    from .detect import load_checkpoint, load_samples, save_checkpoint, train
    from .schema import load_dataset

    cfg = _load_cfg(args)
    if not cfg.data:
        raise CliError("no training data: pass --data or set 'data' in the config")
    out = output_path(args.out or cfg.output_dir)
    init = None
    if args.stage == 2:
        needs_stage1 = cfg.detector.modality == "both" and not cfg.ablate.scpl
        ckpt = Path(args.init) if args.init else out / "stage1.pt"
        if ckpt.is_file():
            init = load_checkpoint(ckpt, cfg)
            init.train()
        elif needs_stage1:
            raise CliError(f"stage 2 needs a stage-1 checkpoint; missing file: {ckpt}")
    samples = load_samples(load_dataset(cfg.data, "train"))
    _write_resolved(cfg, out)
    res = train(cfg, samples, args.stage, model=init, out_dir=out)
    if res.checkpoint is None:
        save_checkpoint(res.model, out / f"stage{args.stage}.pt", args.stage, cfg.detector.epochs - 1)
    last = res.metrics[-1] if res.metrics else {}
    print(f"stage {args.stage}: {len(res.metrics)} epochs, final loss {last.get('total', float('nan')):.4f}")
    print(f"checkpoint {res.checkpoint}; metrics {res.log_path} (digest {res.log_digest[:16]})")
    return 0


def cmd_eval(args) -> int:
    from .detect import load_checkpoint, load_samples, predict_samples
    from .evaluation import condition_report, format_report, write_report
    from .prompt import invocation_count
    from .schema import load_dataset

    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    records = load_dataset(args.data, args.split)
    if not records:
        raise CliError(f"no '{args.split}' records in {args.data}")
    samples = load_samples(records)
    before = invocation_count()
    dets = predict_samples(model, samples, score_thresh=cfg.eval.score_thresh)
    calls = invocation_count() - before
    report = condition_report(
        dets,
        [s.ir_boxes for s in samples],
        [r.condition for r in records],
        cfg.detector.num_classes,
        cfg.eval.iou_thresh,
    )
    report.extra = {"prompt_invocations": calls, "checkpoint": str(args.checkpoint), "split": args.split}
    out = output_path(args.report)
    write_report(report, out)
    _write_resolved(cfg, out.parent)
    print(format_report(report, populated_only=True))
    print(f"prompt-module invocations during evaluation: {calls}")
    print(f"report written to {out}")
    return 0 if calls == 0 else 1


def cmd_inspect_weights(args) -> int:
    from .detect import load_checkpoint, load_samples, modality_weights
    from .evaluation import ATTRIBUTE_VALUES
    from .schema import bucketize, load_dataset

    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, args.split)
    if not records:
        raise CliError(f"no '{args.split}' records in {args.data}")
    try:
        w = modality_weights(model, load_samples(records))
    except ValueError as e:
        raise CliError(str(e)) from e
    keys = [bucketize(r.condition)[args.by] for r in records]
    rows = []
    print(f"{args.by:<18} {'n':>5} {'w_rgb':>7} {'w_ir':>7}")
    for value in ATTRIBUTE_VALUES[args.by]:
        idx = [i for i, k in enumerate(keys) if k == value]
        if not idx:
            continue
        m = w[idx].mean(axis=0)
        rows.append({"value": value, "count": len(idx), "w_rgb": float(m[0]), "w_ir": float(m[1])})
        print(f"{value:<18} {len(idx):>5} {m[0]:7.3f} {m[1]:7.3f}")
    if args.json:
        p = output_path(args.json)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({"by": args.by, "rows": rows}, indent=2))
    return 0


def cmd_report(args) -> int:
    from .evaluation import format_report, load_report

    print(format_report(load_report(args.report), populated_only=args.populated_only))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .schema import ATTRIBUTES

    p = argparse.ArgumentParser(prog="pcdf", description="Condition-aware RGB-IR fusion detector at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic RGB-IR corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mix", help="YAML file of preset -> weight, or presets separated by ';' (equal weights)")
    g.add_argument("--size", type=int, default=64, help="square raster side in pixels")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--ablate", help=f"comma list of components to remove: {','.join(ABLATION_FLAGS)}")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="annotation file (overrides config 'data')")
    t.add_argument("--out", help="artifact directory (overrides config 'output_dir')")
    t.add_argument("--init", help="stage-1 checkpoint for stage 2 (default: <out>/stage1.pt)")
    t.add_argument("--profile", choices=("paper", "desk"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. detector.epochs=3")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint without condition inputs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output path for report.json (.txt and .jsonl written alongside)")
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("inspect-weights", help="mean modality weights grouped by a condition attribute")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--by", required=True, choices=ATTRIBUTES)
    w.add_argument("--split", default="test", choices=("train", "test", "all"))
    w.add_argument("--json", help="also write the table as JSON")
    w.set_defaults(func=cmd_inspect_weights)

    r = sub.add_parser("report", help="render a saved evaluation report as per-condition tables")
    r.add_argument("--report", required=True)
    r.add_argument("--populated-only", action="store_true")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .config import ConfigError
    from .detect import CheckpointError, TrainingError
    from .schema import AnnotationError, SchemaError
    from .synthgen import GenerationError

    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, TrainingError, SchemaError, AnnotationError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
