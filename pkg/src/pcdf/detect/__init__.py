"""Dual-stream detector, training loop and prediction."""

from .head import DetectionHead, build_targets, decode, head_loss, nms
from .model import Batch, Branch, DualBackbone, PCDFDetector, backbone_forward, to_batch
from .train import (
    CheckpointError,
    TrainingError,
    TrainResult,
    load_checkpoint,
    load_samples,
    metrics_digest,
    modality_weights,
    predict,
    predict_samples,
    read_checkpoint,
    save_checkpoint,
    state_digest,
    train,
    train_two_stage,
)

__all__ = [
    "Batch",
    "Branch",
    "CheckpointError",
    "DetectionHead",
    "DualBackbone",
    "PCDFDetector",
    "TrainResult",
    "TrainingError",
    "backbone_forward",
    "build_targets",
    "decode",
    "head_loss",
    "load_checkpoint",
    "load_samples",
    "metrics_digest",
    "modality_weights",
    "nms",
    "predict",
    "predict_samples",
    "read_checkpoint",
    "save_checkpoint",
    "state_digest",
    "to_batch",
    "train",
    "train_two_stage",
]
