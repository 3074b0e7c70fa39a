import json
import subprocess
import sys

import pytest

from pcdf.cli import main

FAST = ["--profile", "desk", "--set", "detector.epochs=1", "--set", "detector.batch_size=8"]


def test_bad_flag_is_usage_error(capsys):
    assert main(["train", "--stage", "1", "--frobnicate"]) == 2
    assert main(["train", "--stage", "3"]) == 2
    assert main([]) == 2


def test_unknown_ablation_flag(tiny_corpus, tmp_path, capsys):
    rc = main(["train", "--stage", "1", "--data", str(tiny_corpus), "--out", str(tmp_path), "--ablate", "xyz", *FAST])
    assert rc == 1
    assert "unknown ablation flag" in capsys.readouterr().err


def test_stage_two_without_checkpoint_names_the_file(tiny_corpus, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--stage", "2", "--data", str(tiny_corpus), "--out", str(out), *FAST])
    assert rc == 1
    assert str(out / "stage1.pt") in capsys.readouterr().err


def test_generate_respects_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PCDF_OUTPUT_ROOT", str(tmp_path))
    assert main(["generate", "--count", "6", "--out", "corp", "--mix", "Night;Normal"]) == 0
    assert (tmp_path / "corp" / "annotations.jsonl").is_file()


def test_generate_rejects_bad_mix(tmp_path, capsys):
    assert main(["generate", "--count", "4", "--out", str(tmp_path), "--mix", "Blizzard"]) != 0


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--stage", "1", "--data", str(tiny_corpus), "--out", str(out), *FAST]) == 0
    assert main(["train", "--stage", "2", "--data", str(tiny_corpus), "--out", str(out), *FAST]) == 0
    return out


def test_train_writes_artifacts(trained):
    for name in ("stage1.pt", "stage2.pt", "stage1_metrics.jsonl", "stage2_metrics.jsonl", "config.yaml", "seed.txt"):
        assert (trained / name).is_file(), name


def test_eval_reports_zero_prompt_calls(trained, tiny_corpus, tmp_path, capsys):
    report = tmp_path / "eval" / "report.json"
    assert main(["eval", "--checkpoint", str(trained / "stage2.pt"), "--data", str(tiny_corpus), "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["prompt_invocations"] == 0
    assert "illumination" in data["per_condition"]
    assert (tmp_path / "eval" / "config.yaml").is_file()
    assert "invocations during evaluation: 0" in capsys.readouterr().out
    assert main(["report", "--report", str(report), "--populated-only"]) == 0


def test_inspect_weights(trained, tiny_corpus, tmp_path, capsys):
    js = tmp_path / "w.json"
    rc = main(["inspect-weights", "--checkpoint", str(trained / "stage2.pt"), "--data", str(tiny_corpus), "--by", "illumination", "--json", str(js)])
    assert rc == 0
    rows = json.loads(js.read_text())["rows"]
    assert rows and all(abs(r["w_rgb"] + r["w_ir"] - 1) < 1e-6 for r in rows)


def test_inspect_weights_on_model_without_gate(tiny_corpus, tmp_path, capsys):
    out = tmp_path / "ca"
    assert main(["train", "--stage", "1", "--data", str(tiny_corpus), "--out", str(out), "--ablate", "scpl", *FAST]) == 0
    rc = main(["inspect-weights", "--checkpoint", str(out / "stage1.pt"), "--data", str(tiny_corpus), "--by", "time"])
    assert rc == 1


def test_missing_checkpoint(tmp_path, tiny_corpus, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(tiny_corpus), "--report", str(tmp_path / "r.json")]) == 1
    assert "nope.pt" in capsys.readouterr().err


@pytest.mark.slow
def test_selftest_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "pcdf", "selftest"], capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "checks passed" in proc.stdout
