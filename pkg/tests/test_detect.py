import dataclasses
import math

import numpy as np
import pytest
import torch

from pcdf.config import ConfigError, build_config
from pcdf.detect import (
    DetectionHead,
    PCDFDetector,
    TrainingError,
    build_targets,
    decode,
    head_loss,
    load_checkpoint,
    load_samples,
    nms,
    predict,
    read_checkpoint,
    state_digest,
    to_batch,
    train,
)
from pcdf.prompt import invocation_count
from pcdf.schema import OrientedBox, load_dataset

EPOCHS = {"detector": {"epochs": 1, "batch_size": 8}}


def desk(**over):
    base = {"profile": "desk", **EPOCHS}
    for k, v in over.items():
        base[k] = {**base.get(k, {}), **v} if isinstance(v, dict) else v
    return build_config(base)


@pytest.fixture(scope="module")
def samples(tiny_corpus):
    return load_samples(load_dataset(tiny_corpus, "train"))[:16]


def test_forward_shape_and_stride():
    m = PCDFDetector(desk()).eval()
    raw = m(torch.rand(2, 3, 64, 64), torch.rand(2, 1, 64, 64))
    assert raw.shape == (2, 5 + 3, 8, 8)


def test_branches_are_independent():
    m = PCDFDetector(desk()).eval()
    rgb, ir = torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64)
    f_rgb, f_ir = m.backbone(rgb, ir)
    f_rgb2, f_ir2 = m.backbone(rgb, torch.rand(1, 1, 64, 64))
    assert torch.equal(f_rgb, f_rgb2) and not torch.equal(f_ir, f_ir2)


def test_raster_mismatch_rejected():
    m = PCDFDetector(desk()).eval()
    with pytest.raises(ValueError):
        m(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 32, 64))


def test_head_channel_check():
    with pytest.raises(ValueError):
        DetectionHead(8, 3)(torch.rand(1, 4, 2, 2))


def test_targets_land_in_center_cell():
    t = build_targets([[OrientedBox(20, 33, 8, 16, 0.0, 2)]], (8, 8), 8)
    assert t["obj"][0, 4, 2] == 1 and t["obj"].sum() == 1
    assert t["cls"][0, 4, 2] == 2
    assert torch.allclose(t["reg"][0, :, 4, 2], torch.tensor([0.5, 0.125, 0.0, math.log(2.0)]))


def test_head_loss_has_three_named_terms_and_empty_images():
    raw = torch.zeros(2, 8, 8, 8, requires_grad=True)
    parts = head_loss(raw, build_targets([[], []], (8, 8), 8))
    assert set(parts) == {"cls", "reg", "obj"}
    assert parts["cls"].item() == 0.0 and parts["obj"].item() > 0
    sum(parts.values()).backward()
    assert raw.grad is not None


def test_nms_removes_duplicates():
    boxes = np.array([[10, 10, 8, 8, 0], [10.5, 10, 8, 8, 0], [40, 40, 8, 8, 0]], dtype=float)
    assert nms(boxes, np.array([0.6, 0.9, 0.5]), 0.5) == [1, 2]


def test_decode_round_trips_a_target():
    raw = torch.full((1, 8, 8, 8), -20.0)
    raw[0, 0, 3, 5] = 20.0
    raw[0, 5 + 1, 3, 5] = 20.0
    raw[0, 1:3, 3, 5] = 0.0
    raw[0, 3:5, 3, 5] = 0.0
    (det,) = decode(raw, 8, (64, 64))[0]
    assert det.class_id == 1
    assert (det.box.cx, det.box.cy, det.box.w, det.box.h) == pytest.approx((44, 28, 8, 8))


def test_blank_image_gives_no_detections():
    m = PCDFDetector(desk()).eval()
    out = predict(m, np.zeros((64, 64, 3), np.uint8), np.zeros((64, 64), np.uint8))
    assert out == [[]]


def test_losses_by_stage(samples):
    m = PCDFDetector(desk())
    b = to_batch(samples[:8])
    s1 = m.training_losses(b, 1)
    assert {"det_cls", "det_reg", "det_obj", "det", "total"} <= set(s1)
    s2 = m.training_losses(b, 2)
    assert {"l_dt", "l_irr", "l_dc", "l_dec"} <= set(s2)
    assert all(torch.isfinite(v) for v in s2.values())


def test_missing_condition_labels(samples):
    bad = [dataclasses.replace(samples[0], condition=None)] + list(samples[1:4])
    with pytest.raises(TrainingError):
        train(desk(), bad, 1)
    with pytest.raises(ValueError):
        PCDFDetector(desk()).training_losses(to_batch(bad), 2)


def test_stage_one_leaves_decoupler_untouched(samples):
    cfg = desk()
    torch.manual_seed(cfg.seed)
    m = PCDFDetector(cfg)
    dec_before = {k: v.clone() for k, v in m.decoupler.state_dict().items()}
    head_before = state_digest(m.head)
    res = train(cfg, samples, 1, model=m)
    for k, v in res.model.decoupler.state_dict().items():
        assert torch.equal(v, dec_before[k]), k
    assert state_digest(res.model.head) != head_before
    res2 = train(cfg, samples, 2, model=res.model)
    assert any(not torch.equal(v, dec_before[k]) for k, v in res2.model.decoupler.state_dict().items())


def test_training_is_deterministic(samples, tmp_path):
    a = train(desk(), samples, 1, out_dir=tmp_path / "a")
    b = train(desk(), samples, 1, out_dir=tmp_path / "b")
    assert a.log_digest == b.log_digest
    assert (tmp_path / "a" / "stage1_metrics.jsonl").read_bytes() == (tmp_path / "b" / "stage1_metrics.jsonl").read_bytes()
    assert state_digest(a.model) == state_digest(b.model)


def test_non_finite_loss_aborts_with_last_good_weights(samples, tmp_path):
    cfg = desk(detector={"lr": 1e30, "grad_clip": 0.0, "epochs": 3})
    with pytest.raises(TrainingError, match="non-finite") as e:
        train(cfg, samples, 1, out_dir=tmp_path)
    assert "last_good" in str(e.value)
    blob = read_checkpoint(tmp_path / "stage1.last_good.pt")
    assert all(torch.isfinite(v).all() for v in blob["state_dict"].values() if v.is_floating_point())


def test_without_pcd_keeps_only_distillation():
    m = PCDFDetector(desk(ablate={"pcd": True}))
    assert m.use_prompt and not m.use_pcd
    assert m.lambdas[0] > 0 and m.lambdas[1:] == (0.0, 0.0)


def test_without_scpl_has_no_prompt_branch():
    m = PCDFDetector(desk(ablate={"scpl": True}))
    assert m.prompter is None and m.decoupler is None and m.fusion.mode == "channel_attention"


@pytest.mark.parametrize("modality", ["rgb", "ir"])
def test_single_stream_baselines(modality, samples):
    m = PCDFDetector(desk(detector={"modality": modality}))
    assert (m.backbone.rgb is None) == (modality == "ir")
    assert "total" in m.training_losses(to_batch(samples[:4]), 1)


def test_checkpoint_evaluates_without_conditions(samples, tmp_path):
    res = train(desk(), samples, 1, out_dir=tmp_path)
    m = load_checkpoint(res.checkpoint)
    assert state_digest(m) == state_digest(res.model)
    before = invocation_count()
    rgb = np.stack([s.rgb for s in samples[:4]])
    ir = np.stack([s.ir for s in samples[:4]])
    out = predict(m, rgb, ir, score_thresh=0.0)
    assert len(out) == 4
    assert invocation_count() == before


def test_ema_and_warmup_settings(samples):
    last = train(desk(detector={"ema_decay": 0.0}), samples, 1)
    avg = train(desk(), samples, 1)
    assert last.log_digest == avg.log_digest  # EMA only changes the returned weights
    assert state_digest(last.model) != state_digest(avg.model)
    with pytest.raises(ConfigError):
        desk(detector={"ema_decay": 1.0})
    with pytest.raises(ConfigError):
        desk(detector={"warmup_epochs": -1})
