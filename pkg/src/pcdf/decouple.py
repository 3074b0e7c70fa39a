"""Condition decoupling: one condition-specific stream, two condition-invariant streams.

The condition-specific encoder reads both modalities and emits a vector in
[0, 1]^D that is pulled towards the (squashed) text embedding with a central
moment discrepancy.  The invariant encoders are residual and start out as the
identity, so a fusion network trained without them still works once they are
switched on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

DEFAULT_LAMBDAS = (0.01, 0.003, 0.01)
DEFAULT_CMD_ORDER = 5


class LossConfigError(ValueError):
    pass


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.SiLU())


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ConditionSpecificEncoder(nn.Module):
    def __init__(self, channels: int, embed_dim: int = 512):
        super().__init__()
        self.body = nn.Sequential(_conv_block(2 * channels, channels), _conv_block(channels, channels))
        self.proj = nn.Linear(channels, embed_dim)

    def forward(self, f_rgb: torch.Tensor, f_ir: torch.Tensor) -> torch.Tensor:
        x = self.body(torch.cat([f_rgb, f_ir], dim=1)).mean(dim=(-2, -1))
        return torch.sigmoid(self.proj(x))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class InvariantEncoder(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(ResidualBlock(channels), ResidualBlock(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


@dataclass
class FeatureBundle:
    f_rgb: torch.Tensor
    f_ir: torch.Tensor
    f_spec: torch.Tensor | None
    f_inv_rgb: torch.Tensor
    f_inv_ir: torch.Tensor


class Decoupler(nn.Module):
    """Three-branch decoupling network plus the fixed projection used by the irrelevance loss."""

    def __init__(self, channels: int, embed_dim: int = 512, seed: int = 0):
        super().__init__()
        self.spec = ConditionSpecificEncoder(channels, embed_dim)
        self.inv_rgb = InvariantEncoder(channels)
        self.inv_ir = InvariantEncoder(channels)
        g = torch.Generator().manual_seed(seed + 7)
        self.register_buffer("irr_proj", torch.randn(embed_dim, channels, generator=g) / embed_dim**0.5)

    def forward(self, f_rgb: torch.Tensor, f_ir: torch.Tensor) -> FeatureBundle:
        return decouple_features(f_rgb, f_ir, self)


def decouple_features(f_rgb: torch.Tensor, f_ir: torch.Tensor, params: Decoupler) -> FeatureBundle:
    if f_rgb.shape != f_ir.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
    return FeatureBundle(
        f_rgb=f_rgb,
        f_ir=f_ir,
        f_spec=params.spec(f_rgb, f_ir),
        f_inv_rgb=params.inv_rgb(f_rgb),
        f_inv_ir=params.inv_ir(f_ir),
    )


def cmd_loss(x: torch.Tensor, y: torch.Tensor, bounds: tuple[float, float] = (0.0, 1.0), order: int = DEFAULT_CMD_ORDER) -> torch.Tensor:
    """Central moment discrepancy between two samples of D-vectors.

    ``x`` and ``y`` are (B, D) or a single (D,) vector.  With one sample every
    central moment of order >= 2 is zero, leaving only the mean term.
    """
    if order < 2:
        raise LossConfigError(f"CMD order must be >= 2, got {order}")
    a, b = bounds
    span = abs(b - a)
    if span == 0:
        raise LossConfigError("CMD bounds must have non-zero width")
    x = x.reshape(1, -1) if x.dim() == 1 else x
    y = y.reshape(1, -1) if y.dim() == 1 else y
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    lo, hi = min(a, b), max(a, b)
    tol = 1e-9 * span
    for name, t in (("x", x), ("y", y)):
        tv = t.detach()
        if bool((tv < lo - tol).any()) or bool((tv > hi + tol).any()):
            raise ValueError(f"{name} has values outside the CMD bounds [{lo}, {hi}]")
    mx, my = x.mean(0), y.mean(0)
    loss = torch.linalg.vector_norm(mx - my) / span
    cx, cy = x - mx, y - my
    for k in range(2, order + 1):
        ck_x = (cx**k).mean(0)
        ck_y = (cy**k).mean(0)
        loss = loss + torch.linalg.vector_norm(ck_x - ck_y) / span**k
    return loss


def distillation_loss(f_spec: torch.Tensor, target: torch.Tensor, order: int = DEFAULT_CMD_ORDER) -> torch.Tensor:
    """CMD between the condition-specific batch and the squashed condition embeddings."""
    if f_spec.shape[0] != target.shape[0]:
        raise ValueError(f"batch size mismatch: {f_spec.shape[0]} vs {target.shape[0]}")
    return cmd_loss(f_spec, target, (0.0, 1.0), order)


def irrelevance_loss(f_inv_rgb: torch.Tensor, f_inv_ir: torch.Tensor, f_spec_proj: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of (positions x channels) @ projected condition vector, per modality.

    ``f_spec_proj`` is the condition-specific vector already mapped to C channels,
    shape (B, C).  Each term is divided by the element count H*W*C and the batch
    is averaged.
    """
    total = f_spec_proj.new_zeros(())
    for f in (f_inv_rgb, f_inv_ir):
        B, C, H, W = f.shape
        if f_spec_proj.shape != (B, C):
            raise ValueError(f"projected condition vector has shape {tuple(f_spec_proj.shape)}, expected {(B, C)}")
        m = f.reshape(B, C, H * W).transpose(1, 2)
        prod = torch.bmm(m, f_spec_proj.unsqueeze(-1))
        total = total + (prod**2).sum(dim=(1, 2)).mean() / (H * W * C)
    return total


def bundle_irrelevance_loss(bundle: FeatureBundle, params: Decoupler) -> torch.Tensor:
    proj = bundle.f_spec @ params.irr_proj.to(bundle.f_spec.dtype)
    return irrelevance_loss(bundle.f_inv_rgb, bundle.f_inv_ir, proj)


def discrimination_loss(
    bundle: FeatureBundle,
    targets,
    head_loss: Callable[[torch.Tensor, object], dict],
    unimodal: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Sum over modalities of the head's cls + reg + obj losses on one invariant stream.

    ``unimodal`` lifts a single C-channel stream to the head's input layout;
    ``head_loss`` returns a dict with ``cls``, ``reg`` and ``obj`` entries.
    """
    total = None
    for f in (bundle.f_inv_rgb, bundle.f_inv_ir):
        parts = head_loss(unimodal(f), targets)
        term = parts["cls"] + parts["reg"] + parts["obj"]
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossBreakdown:
    l_dt: float | torch.Tensor
    l_irr: float | torch.Tensor
    l_dc: float | torch.Tensor
    l_dec: float | torch.Tensor
    lambda1: float
    lambda2: float
    lambda3: float


def decoupling_loss(l_dt, l_irr, l_dc, lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS) -> LossBreakdown:
    lam1, lam2, lam3 = lambdas
    if min(lambdas) < 0:
        raise LossConfigError(f"loss weights must be non-negative, got {lambdas}")
    # A zero weight drops the term outright so it contributes no gradient (or NaN).
    l_dec = 0.0
    for lam, term in ((lam1, l_dt), (lam2, l_irr), (lam3, l_dc)):
        if lam != 0:
            l_dec = l_dec + lam * term
    return LossBreakdown(l_dt, l_irr, l_dc, l_dec, lam1, lam2, lam3)
