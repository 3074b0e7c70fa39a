"""Two-stage training loop, checkpoints and condition-free prediction."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from ..config import RunConfig, build_config
from ..evaluation import Detection
from ..prompt import inference_guard
from ..schema import AnnotationRecord, ImagePairSample
from .head import decode
from .model import PCDFDetector, to_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pcdf-checkpoint/1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: PCDFDetector
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None

    @property
    def log_digest(self) -> str:
        return metrics_digest(self.metrics)


def metrics_digest(metrics: Sequence[dict]) -> str:
    h = hashlib.sha256()
    for row in metrics:
        h.update(json.dumps(row, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def state_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_samples(records: Sequence[AnnotationRecord]) -> list[ImagePairSample]:
    return [r.load() for r in records]


def save_checkpoint(model: PCDFDetector, path: str | Path, stage: int, epoch: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    blob = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # noqa: BLE001 - surface any unpickling failure uniformly
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return blob


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> PCDFDetector:
    """Rebuild the model stored in ``path``; ``cfg`` (if given) must describe the same architecture."""
    blob = read_checkpoint(path)
    stored = build_config(_strip_profile(blob["config"]))
    model = PCDFDetector(cfg if cfg is not None else stored)
    try:
        model.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not match the configured model: {e}") from e
    model.eval()
    return model


def _strip_profile(d: dict) -> dict:
    # A stored config is fully resolved; re-applying the profile layer is harmless
    # but keeping it would make the profile key order-sensitive.
    d = dict(d)
    d.pop("profile", None)
    return d


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.detector.lr * cfg.detector.lr_decay**epoch


def train(
    cfg: RunConfig,
    samples: Sequence[ImagePairSample],
    stage: int,
    model: PCDFDetector | None = None,
    out_dir: str | Path | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Run one training stage.

    Stage 1 optimizes everything except the decoupling network, with the fusion
    gate driven by the prompt embedding.  Stage 2 optimizes the whole model with
    the detection loss plus the decoupling losses.  ``model`` carries weights over
    from a previous stage; otherwise a fresh model is seeded from ``cfg.seed``.

    The returned weights are an exponential moving average of the iterates
    (``detector.ema_decay``; 0 keeps the last iterate).

    With ``out_dir`` set, per-epoch metrics go to ``stage{N}_metrics.jsonl`` and
    the final weights to ``stage{N}.pt``.  A non-finite loss aborts the run after
    writing the last good weights to ``stage{N}.last_good.pt``.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if not samples:
        raise TrainingError("training set is empty")
    if cfg.detector.modality == "both" and not cfg.ablate.scpl:
        missing = [s.record_id for s in samples if s.condition is None]
        if missing:
            raise TrainingError(
                f"{len(missing)} training samples lack condition labels (first: {missing[0]!r}); "
                "labels are required for training"
            )
    torch.manual_seed(cfg.seed * 1000 + stage)
    if model is None:
        torch.manual_seed(cfg.seed)
        model = PCDFDetector(cfg)
    model.train()
    n_epochs = cfg.detector.epochs if epochs is None else epochs
    d = cfg.detector
    groups = model.param_groups(stage, d.gate_lr_mult)
    params = [p for g in groups for p in g["params"]]
    opt = torch.optim.SGD(groups, lr=d.lr, momentum=d.momentum, weight_decay=d.weight_decay, nesterov=True)
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / f"stage{stage}_metrics.jsonl" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    gen = torch.Generator().manual_seed(cfg.seed * 7777 + stage)
    metrics: list[dict] = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    B = d.batch_size
    steps_per_epoch = math.ceil(len(samples) / B)
    # Linear warmup at the start of each stage: stage 2 begins with a fresh
    # optimizer and a new condition source for the fusion gate.
    warmup_steps = int(round(d.warmup_epochs * steps_per_epoch))
    ema = None
    if d.ema_decay > 0:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(d.ema_decay), use_buffers=True)
    for epoch in range(n_epochs):
        lr = _lr_at(cfg, epoch)
        perm = torch.randperm(len(samples), generator=gen).tolist()
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(perm), B):
            step = epoch * steps_per_epoch + n_batches
            scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
            for g in opt.param_groups:
                g["lr"] = lr * scale * g["lr_mult"]
            batch = to_batch([samples[i] for i in perm[start : start + B]])
            try:
                losses = model.training_losses(batch, stage)
                total = losses["total"]
                finite = bool(torch.isfinite(total))
            except FloatingPointError:
                finite = False
            if not finite:
                model.load_state_dict(last_good)
                where = ""
                if out:
                    p = save_checkpoint(model, out / f"stage{stage}.last_good.pt", stage, max(epoch - 1, 0))
                    where = f"; last good weights saved to {p}"
                raise TrainingError(f"non-finite loss at stage {stage} epoch {epoch} batch {n_batches}{where}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if d.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, d.grad_clip)
            opt.step()
            if ema is not None:
                ema.update_parameters(model)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1
        row = {"stage": stage, "epoch": epoch, "lr": lr, "batches": n_batches}
        row.update({k: v / n_batches for k, v in sorted(sums.items())})
        metrics.append(row)
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info("stage %d epoch %d total %.4f", stage, epoch, row["total"])
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if ema is not None and n_epochs > 0:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    ckpt = save_checkpoint(model, out / f"stage{stage}.pt", stage, n_epochs - 1) if out else None
    return TrainResult(model, metrics, ckpt, log_path)


def train_two_stage(cfg: RunConfig, samples: Sequence[ImagePairSample], out_dir: str | Path | None = None) -> TrainResult:
    """Stage 1 then stage 2 from its weights.

    Models without a prompt branch (single stream, channel attention) optimize the
    same loss in both stages, so every variant gets the same number of epochs.
    """
    first = train(cfg, samples, 1, out_dir=out_dir)
    second = train(cfg, samples, 2, model=first.model, out_dir=out_dir)
    second.metrics = first.metrics + second.metrics
    return second


def _images_to_tensors(rgb: np.ndarray, ir: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    rgb = np.asarray(rgb)
    ir = np.asarray(ir)
    if rgb.ndim == 3:
        rgb = rgb[None]
    if ir.ndim == 2:
        ir = ir[None]
    if rgb.shape[1:3] != ir.shape[1:3]:
        raise ValueError(f"raster size mismatch: {rgb.shape[1:3]} vs {ir.shape[1:3]}")
    t_rgb = torch.from_numpy(np.ascontiguousarray(rgb)).permute(0, 3, 1, 2).float() / 255.0
    t_ir = torch.from_numpy(np.ascontiguousarray(ir))[:, None].float() / 255.0
    return t_rgb, t_ir


def predict(
    model: PCDFDetector,
    rgb: np.ndarray,
    ir: np.ndarray,
    score_thresh: float | None = None,
    nms_iou: float | None = None,
    max_dets: int | None = None,
) -> list[list[Detection]]:
    """Detections for uint8 rasters (single pair or a batch); never touches the prompt branch."""
    ev = model.cfg.eval
    t_rgb, t_ir = _images_to_tensors(rgb, ir)
    H, W = t_rgb.shape[-2:]
    model.eval()
    with inference_guard(), torch.no_grad():
        raw = model(t_rgb, t_ir)
    return decode(
        raw,
        model.stride,
        (W, H),
        ev.display_thresh if score_thresh is None else score_thresh,
        ev.nms_iou if nms_iou is None else nms_iou,
        ev.max_dets if max_dets is None else max_dets,
    )


def predict_samples(model: PCDFDetector, samples: Sequence[ImagePairSample], batch_size: int = 64, **kw) -> list[list[Detection]]:
    out: list[list[Detection]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        out.extend(predict(model, np.stack([s.rgb for s in chunk]), np.stack([s.ir for s in chunk]), **kw))
    return out


def modality_weights(model: PCDFDetector, samples: Sequence[ImagePairSample], batch_size: int = 64) -> np.ndarray:
    """(N, 2) array of per-sample channel-mean (w_rgb, w_ir) on the inference path."""
    rows = []
    model.eval()
    with inference_guard(), torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            t_rgb, t_ir = _images_to_tensors(np.stack([s.rgb for s in chunk]), np.stack([s.ir for s in chunk]))
            w = model.modality_weights(t_rgb, t_ir)
            rows.append(torch.stack([w.w_rgb.mean(-1), w.w_ir.mean(-1)], dim=1).numpy())
    return np.concatenate(rows) if rows else np.zeros((0, 2))


def is_finite_metrics(metrics: Sequence[dict]) -> bool:
    return all(math.isfinite(v) for row in metrics for v in row.values() if isinstance(v, float))
