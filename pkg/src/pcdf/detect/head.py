"""Anchor-free single-scale detection head: objectness, class scores and box per grid cell."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .. import geometry
from ..evaluation import Detection
from ..schema import OrientedBox

# Channel layout of the raw head output.
OBJ, DX, DY, LW, LH, CLS = 0, 1, 2, 3, 4, 5


class DetectionHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64, prior: float = 0.02):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, 5 + num_classes, 1)
        with torch.no_grad():
            self.out.bias.zero_()
            self.out.bias[OBJ] = math.log(prior / (1 - prior))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got {x.shape[1]}")
        return self.out(self.body(x))


def build_targets(boxes: Sequence[Sequence[OrientedBox]], grid: tuple[int, int], stride: int, dtype=torch.float32) -> dict:
    """Assign each ground-truth box to the grid cell holding its center.

    Boxes are regressed axis-aligned: theta is ignored and (w, h) are the box's
    own extents.  A later box overwrites an earlier one sharing its cell.
    """
    gh, gw = grid
    B = len(boxes)
    obj = torch.zeros(B, gh, gw, dtype=dtype)
    cls = torch.full((B, gh, gw), -1, dtype=torch.long)
    reg = torch.zeros(B, 4, gh, gw, dtype=dtype)
    for b, img in enumerate(boxes):
        for box in img:
            j = min(max(int(box.cx // stride), 0), gw - 1)
            i = min(max(int(box.cy // stride), 0), gh - 1)
            obj[b, i, j] = 1.0
            cls[b, i, j] = box.class_id
            reg[b, 0, i, j] = box.cx / stride - j
            reg[b, 1, i, j] = box.cy / stride - i
            reg[b, 2, i, j] = math.log(box.w / stride)
            reg[b, 3, i, j] = math.log(box.h / stride)
    return {"obj": obj, "cls": cls, "reg": reg}


def head_loss(raw: torch.Tensor, targets: dict) -> dict:
    """Objectness BCE over all cells, class BCE and L1 box error on positive cells.

    Every term is normalized by the number of positive cells (at least 1).
    """
    obj_t = targets["obj"].to(raw.dtype)
    pos = obj_t > 0.5
    npos = max(int(pos.sum()), 1)
    l_obj = F.binary_cross_entropy_with_logits(raw[:, OBJ], obj_t, reduction="sum") / npos
    if bool(pos.any()):
        cls_logits = raw[:, CLS:].permute(0, 2, 3, 1)[pos]
        onehot = F.one_hot(targets["cls"][pos], raw.shape[1] - CLS).to(raw.dtype)
        l_cls = F.binary_cross_entropy_with_logits(cls_logits, onehot, reduction="sum") / npos
        pred = torch.stack(
            [torch.sigmoid(raw[:, DX]), torch.sigmoid(raw[:, DY]), raw[:, LW], raw[:, LH]], dim=1
        ).permute(0, 2, 3, 1)[pos]
        tgt = targets["reg"].to(raw.dtype).permute(0, 2, 3, 1)[pos]
        l_reg = (pred - tgt).abs().sum() / npos
    else:
        l_cls = raw.sum() * 0.0
        l_reg = raw.sum() * 0.0
    return {"cls": l_cls, "reg": l_reg, "obj": l_obj}


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy suppression by rotated IoU; returns kept indices in descending score order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    iou = geometry.rotated_iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_thresh
    return keep


def decode(
    raw: torch.Tensor,
    stride: int,
    image_size: tuple[int, int],
    score_thresh: float = 0.25,
    nms_iou: float = 0.5,
    max_dets: int = 100,
) -> list[list[Detection]]:
    """Turn raw head maps into per-image detection lists (axis-aligned, theta = 0)."""
    W, H = image_size
    raw = raw.detach().to(torch.float64)
    B, _, gh, gw = raw.shape
    obj = torch.sigmoid(raw[:, OBJ])
    cls_p = torch.sigmoid(raw[:, CLS:])
    best_p, best_c = cls_p.max(dim=1)
    score = (obj * best_p).numpy()
    best_c = best_c.numpy()
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = (jj[None] + torch.sigmoid(raw[:, DX]).numpy()) * stride
    cy = (ii[None] + torch.sigmoid(raw[:, DY]).numpy()) * stride
    w = np.exp(np.clip(raw[:, LW].numpy(), -10, 10)) * stride
    h = np.exp(np.clip(raw[:, LH].numpy(), -10, 10)) * stride
    out = []
    for b in range(B):
        sel = np.nonzero(score[b] >= score_thresh)
        dets = []
        for c in np.unique(best_c[b][sel]) if len(sel[0]) else []:
            m = best_c[b][sel] == c
            ys, xs = sel[0][m], sel[1][m]
            x1 = np.clip(cx[b, ys, xs] - w[b, ys, xs] / 2, 0, W)
            x2 = np.clip(cx[b, ys, xs] + w[b, ys, xs] / 2, 0, W)
            y1 = np.clip(cy[b, ys, xs] - h[b, ys, xs] / 2, 0, H)
            y2 = np.clip(cy[b, ys, xs] + h[b, ys, xs] / 2, 0, H)
            ok = (x2 - x1 > 1e-6) & (y2 - y1 > 1e-6)
            boxes = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, np.zeros_like(x1)], axis=1)[ok]
            sc = score[b, ys, xs][ok]
            for k in nms(boxes, sc, nms_iou):
                bx = boxes[k]
                dets.append(Detection(OrientedBox(bx[0], bx[1], bx[2], bx[3], 0.0, int(c)), float(sc[k])))
        dets.sort(key=lambda d: -d.score)
        out.append(dets[:max_dets])
    return out
