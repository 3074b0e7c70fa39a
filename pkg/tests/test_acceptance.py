"""Acceptance oracle: one pass/fail line per criterion in the terminal summary.

Criteria 1-7 are the invariant suite.  Criteria 8-10 share one desk-scale
experiment suite (11 variants x 3 seeds on a 500-pair synthetic corpus), which
takes roughly half an hour on one CPU core.
"""

import json
import sys

import pytest

from pcdf import selftest
from pcdf.cli import main as cli_main
from pcdf.detect import train_two_stage
from pcdf.experiments import ABLATIONS, BASELINES, DEFAULT_SEEDS, VARIANTS, desk_corpus, run_suite, variant_config


def report(record_property, n, passed, detail):
    record_property("criterion", f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.mark.parametrize(
    "n,check",
    list(enumerate(selftest.CHECKS, start=1)),
    ids=[c.__name__.removeprefix("check_") for c in selftest.CHECKS],
)
def test_invariant(n, check, record_property):
    r = check()
    report(record_property, n, r.passed, f"{r.name}: {r.detail}")
    assert r.passed, r.detail


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return desk_corpus(tmp_path_factory.mktemp("desk_corpus"), count=500, seed=0)


@pytest.fixture(scope="session")
def suite(corpus):
    def progress(r):
        print(f"[suite] {r.variant:<18} seed {r.seed}: mAP {100 * r.map50:.2f} gaps {r.weight_gap}", file=sys.stderr, flush=True)

    return run_suite(list(VARIANTS), corpus, DEFAULT_SEEDS, progress=progress)


@pytest.mark.slow
def test_gating_follows_conditions(suite, record_property):
    night = suite.median_gap("pcdf", "night")
    crossover = suite.median_gap("pcdf", "overexposure+noon")
    ok = night > 0.2 and crossover < -0.2
    report(record_property, 8, ok, f"median w_ir - w_rgb: night {night:+.3f} (> 0.2), overexposure+noon {crossover:+.3f} (< -0.2)")
    assert ok


@pytest.mark.slow
def test_fusion_beats_single_streams(suite, record_property):
    full = suite.median_map("pcdf")
    single = {b: suite.median_map(b) for b in BASELINES}
    margin = min(100 * (full - v) for v in single.values())
    ok = margin >= 5.0
    detail = ", ".join(f"{b} {100 * v:.1f}" for b, v in single.items())
    report(record_property, 9, ok, f"pcdf {100 * full:.1f} vs {detail}; margin {margin:.1f} points (>= 5)")
    assert ok


@pytest.mark.slow
def test_ablation_ordering(suite, record_property):
    full = 100 * suite.median_map("pcdf")
    excess = {a: 100 * suite.median_map(a) - full for a in ABLATIONS}
    violations = {a: e for a, e in excess.items() if e > 1.0}
    ok = not violations
    detail = f"pcdf {full:.1f}; " + ", ".join(f"{a} {e:+.1f}" for a, e in excess.items())
    report(record_property, 10, ok, detail + (f"; violations {sorted(violations)}" if violations else ""))
    print(suite.table(), file=sys.stderr)
    assert ok, f"ablations beating the full model by more than 1 point: {violations}"


@pytest.mark.slow
def test_eval_never_invokes_prompt(corpus, tmp_path, record_property, capsys):
    cfg = variant_config("pcdf", 0, {"detector": {"epochs": 2}})
    res = train_two_stage(cfg, corpus.train, out_dir=tmp_path / "run")
    ckpt = res.checkpoint
    report_path = tmp_path / "eval" / "report.json"
    rc = cli_main(["eval", "--checkpoint", str(ckpt), "--data", str(corpus.annotation_file), "--report", str(report_path)])
    calls = json.loads(report_path.read_text())["prompt_invocations"]
    ok = rc == 0 and calls == 0
    report(record_property, 11, ok, f"eval exit {rc}; prompt-module invocations {calls}")
    assert ok


@pytest.mark.slow
def test_identical_runs_have_identical_logs(corpus, tmp_path, record_property):
    cfg = variant_config("pcdf", 1, {"detector": {"epochs": 2}})
    a = train_two_stage(cfg, corpus.train, out_dir=tmp_path / "a")
    b = train_two_stage(cfg, corpus.train, out_dir=tmp_path / "b")
    files_equal = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("stage1_metrics.jsonl", "stage2_metrics.jsonl")
    )
    ok = a.log_digest == b.log_digest and files_equal
    report(record_property, 12, ok, f"metric-log digests {a.log_digest[:12]} / {b.log_digest[:12]}; log files identical={files_equal}")
    assert ok
