"""Condition-aware dynamic fusion and the static/data-driven variants it is compared with."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

FUSION_MODES = ("pcdf", "add", "concat", "channel_attention")
LOGIT_CLAMP = 30.0


@dataclass
class ModalityWeights:
    w_rgb: torch.Tensor
    w_ir: torch.Tensor


class GatingProjection(nn.Module):
    """Condition vector (D) -> 2C logits, rgb half first.

    Condition vectors of different samples share most of their content and
    differ by a small condition-dependent part.  The input batch norm removes
    the shared part and rescales the differences before the MLP.
    """

    def __init__(self, embed_dim: int, channels: int, hidden: int = 128):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.BatchNorm1d(embed_dim), nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * channels)
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, f_spec: torch.Tensor) -> torch.Tensor:
        return self.net(f_spec)


def pair_softmax(logits: torch.Tensor, channels: int) -> ModalityWeights:
    """Per-channel two-way softmax between the rgb half and the ir half of ``logits``."""
    if not bool(torch.isfinite(logits).all()):
        bad = (~torch.isfinite(logits)).sum().item()
        raise FloatingPointError(
            f"gating logits contain {bad} non-finite values (min={logits.nan_to_num().min().item():.3g}, "
            f"max={logits.nan_to_num().max().item():.3g})"
        )
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).reshape(*logits.shape[:-1], 2, channels)
    w = torch.softmax(z, dim=-2)
    return ModalityWeights(w[..., 0, :], w[..., 1, :])


def gate_weights(f_spec: torch.Tensor, params: GatingProjection) -> ModalityWeights:
    return pair_softmax(params(f_spec), params.channels)


def fuse(f_inv_rgb: torch.Tensor, f_inv_ir: torch.Tensor, weights: ModalityWeights) -> torch.Tensor:
    """Concat(w_rgb * f_rgb, w_ir * f_ir) with the weights broadcast over H x W."""
    if f_inv_rgb.shape != f_inv_ir.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_inv_rgb.shape)} vs {tuple(f_inv_ir.shape)}")
    C = f_inv_rgb.shape[1]
    if weights.w_rgb.shape[-1] != C or weights.w_ir.shape[-1] != C:
        raise ValueError(f"weights have {weights.w_rgb.shape[-1]} channels, features have {C}")
    return torch.cat([weights.w_rgb[..., None, None] * f_inv_rgb, weights.w_ir[..., None, None] * f_inv_ir], dim=1)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation over the concatenated streams; uses no condition input."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.net = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels), nn.Sigmoid())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.net(x.mean(dim=(-2, -1)))
        return x * w[..., None, None]


class FusionBlock(nn.Module):
    """Fuses two C-channel streams, optionally guided by a condition vector.

    ``pcdf``: per-channel soft gate from the condition vector.
    ``add`` / ``concat``: the projected condition vector is added to / stacked with
    both streams, which are then concatenated with fixed weights.
    ``channel_attention``: SE-style reweighting from the visual features alone.
    """

    def __init__(self, mode: str, channels: int, embed_dim: int = 512, hidden: int = 128):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.mode = mode
        self.channels = channels
        if mode == "pcdf":
            self.gating = GatingProjection(embed_dim, channels, hidden)
        elif mode in ("add", "concat"):
            self.inject = nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        else:
            self.attention = ChannelAttention(2 * channels)

    @property
    def out_channels(self) -> int:
        return 3 * self.channels if self.mode == "concat" else 2 * self.channels

    def weights(self, cond: torch.Tensor) -> ModalityWeights:
        if self.mode != "pcdf":
            raise ValueError(f"fusion mode {self.mode!r} has no modality weights")
        return gate_weights(cond, self.gating)

    def forward(self, f_rgb: torch.Tensor, f_ir: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        return fuse_variant(f_rgb, f_ir, cond, self)


def fuse_variant(f_rgb: torch.Tensor, f_ir: torch.Tensor, cond: torch.Tensor | None, block: FusionBlock) -> torch.Tensor:
    if f_rgb.shape != f_ir.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
    mode = block.mode
    if mode == "channel_attention":
        return block.attention(torch.cat([f_rgb, f_ir], dim=1))
    if cond is None:
        raise ValueError(f"fusion mode {mode!r} needs a condition vector")
    cond = cond.to(f_rgb.dtype)
    if mode == "pcdf":
        return fuse(f_rgb, f_ir, block.weights(cond))
    p = block.inject(cond)[..., None, None].expand_as(f_rgb)
    if mode == "add":
        return torch.cat([f_rgb + p, f_ir + p], dim=1)
    return torch.cat([f_rgb, f_ir, p], dim=1)
