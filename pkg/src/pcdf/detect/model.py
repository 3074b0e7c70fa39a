"""Dual-stream detector wiring the prompt, decoupling and fusion modules together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from ..config import RunConfig
from ..decouple import (
    Decoupler,
    FeatureBundle,
    bundle_irrelevance_loss,
    decoupling_loss,
    discrimination_loss,
    distillation_loss,
)
from ..fusion import FusionBlock, ModalityWeights
from ..prompt import ConditionPrompter, HashTextEncoder, PromptTemplate, TextEncoderPort
from ..schema import ConditionRecord, OrientedBox
from .head import DetectionHead, build_targets, head_loss

STAGES = (1, 2)


def _stage(cin: int, cout: int, stride: int) -> nn.Sequential:
    g = 4 if cout % 4 == 0 else 1
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(g, cout), nn.SiLU())


class Branch(nn.Module):
    """Four conv stages, overall stride 8."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        c4, c2 = max(channels // 4, 4), max(channels // 2, 4)
        self.layers = nn.Sequential(
            _stage(in_channels, c4, 1),
            _stage(c4, c2, 2),
            _stage(c2, channels, 2),
            _stage(channels, channels, 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class DualBackbone(nn.Module):
    def __init__(self, channels: int, modality: str = "both"):
        super().__init__()
        self.modality = modality
        self.rgb = Branch(3, channels) if modality in ("both", "rgb") else None
        self.ir = Branch(1, channels) if modality in ("both", "ir") else None

    def forward(self, rgb: torch.Tensor | None, ir: torch.Tensor | None):
        if rgb is not None and ir is not None and rgb.shape[-2:] != ir.shape[-2:]:
            raise ValueError(f"raster size mismatch: {tuple(rgb.shape[-2:])} vs {tuple(ir.shape[-2:])}")
        f_rgb = self.rgb(rgb) if self.rgb is not None else None
        f_ir = self.ir(ir) if self.ir is not None else None
        return f_rgb, f_ir


def backbone_forward(rgb: torch.Tensor, ir: torch.Tensor, params: DualBackbone):
    return params(rgb, ir)


@dataclass
class Batch:
    rgb: torch.Tensor
    ir: torch.Tensor
    boxes: list[tuple[OrientedBox, ...]]
    conditions: list[ConditionRecord] | None


class PCDFDetector(nn.Module):
    """Backbone -> (decoupling) -> fusion -> head, with the prompt branch used only in training.

    Ablation switches from ``cfg.ablate`` change the wiring:
    ``scpl`` replaces condition guidance with channel attention and drops the
    prompt and decoupling branches; ``scpt`` keeps every prompt block; ``pcd``
    fuses the original features and keeps only the distillation loss; the loss
    switches zero the corresponding weight.
    """

    def __init__(self, cfg: RunConfig, encoder: TextEncoderPort | None = None):
        super().__init__()
        d = cfg.detector
        ab = cfg.ablate
        self.cfg = cfg
        self.modality = d.modality
        self.stride = d.stride
        self.num_classes = d.num_classes
        C = d.channels
        self.backbone = DualBackbone(C, d.modality)
        self.prompter = None
        self.decoupler = None
        self.fusion = None
        self.use_prompt = d.modality == "both" and not ab.scpl
        self.use_pcd = self.use_prompt and not ab.pcd
        if d.modality == "both":
            mode = "channel_attention" if ab.scpl else cfg.fusion.mode
            embed_dim = cfg.prompt.embed_dim
            if self.use_prompt:
                tpl = PromptTemplate(cfg.prompt.template.subject, tuple(cfg.prompt.template.prefixes))
                self.prompter = ConditionPrompter(
                    C,
                    encoder if encoder is not None else HashTextEncoder(embed_dim, seed=0),
                    tpl,
                    cfg.prompt.tau,
                    cfg.prompt.hidden,
                    tune=not ab.scpt,
                )
                self.decoupler = Decoupler(C, embed_dim, seed=cfg.seed)
            self.fusion = FusionBlock(mode, C, embed_dim, cfg.fusion.hidden)
            head_in = self.fusion.out_channels
        else:
            head_in = C
        self.head = DetectionHead(head_in, d.num_classes, d.head_hidden)
        lam = cfg.loss
        self.lambdas = (
            0.0 if ab.l_dt else lam.lambda1,
            0.0 if (ab.l_irr or not self.use_pcd) else lam.lambda2,
            0.0 if (ab.l_dc or not self.use_pcd) else lam.lambda3,
        )

    # -- parameter groups ------------------------------------------------------

    def stage_parameters(self, stage: int) -> list[nn.Parameter]:
        """Stage 1 leaves the decoupling network untouched."""
        if stage not in STAGES:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        skip = set()
        if stage == 1 and self.decoupler is not None:
            skip = {id(p) for p in self.decoupler.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def gate_modules(self) -> list[nn.Module]:
        """Modules that map conditions (or condition-specific features) to fusion weights."""
        mods: list[nn.Module] = []
        if self.prompter is not None:
            mods.append(self.prompter.gate)
        if self.decoupler is not None:
            mods.append(self.decoupler.spec)
        if self.fusion is not None and self.fusion.mode == "pcdf":
            mods.append(self.fusion.gating)
        return mods

    def param_groups(self, stage: int, gate_lr_mult: float = 1.0) -> list[dict]:
        params = self.stage_parameters(stage)
        gate_ids = {id(p) for m in self.gate_modules() for p in m.parameters()}
        gate = [p for p in params if id(p) in gate_ids]
        rest = [p for p in params if id(p) not in gate_ids]
        groups = [{"params": rest, "lr_mult": 1.0}]
        if gate:
            groups.append({"params": gate, "lr_mult": gate_lr_mult})
        return groups

    def decoupler_state(self) -> dict:
        if self.decoupler is None:
            return {}
        return {k: v.detach().clone() for k, v in self.decoupler.state_dict().items()}

    # -- forward paths -----------------------------------------------------------

    def _grid(self, x: torch.Tensor) -> tuple[int, int]:
        return x.shape[-2], x.shape[-1]

    def _unimodal(self, cond: torch.Tensor | None):
        def lift(f: torch.Tensor) -> torch.Tensor:
            return self.fusion(f, f, cond)

        return lift

    def fused_features(self, rgb: torch.Tensor, ir: torch.Tensor) -> tuple[torch.Tensor, FeatureBundle | None]:
        """Inference-path features: never consults condition labels or prompts."""
        f_rgb, f_ir = self.backbone(rgb if self.backbone.rgb is not None else None, ir if self.backbone.ir is not None else None)
        if self.modality == "rgb":
            return f_rgb, None
        if self.modality == "ir":
            return f_ir, None
        if not self.use_prompt:
            return self.fusion(f_rgb, f_ir, None), None
        bundle = self._decouple(f_rgb, f_ir)
        return self.fusion(bundle.f_inv_rgb, bundle.f_inv_ir, bundle.f_spec), bundle

    def _decouple(self, f_rgb: torch.Tensor, f_ir: torch.Tensor) -> FeatureBundle:
        f_spec = self.decoupler.spec(f_rgb, f_ir)
        if self.use_pcd:
            return FeatureBundle(f_rgb, f_ir, f_spec, self.decoupler.inv_rgb(f_rgb), self.decoupler.inv_ir(f_ir))
        return FeatureBundle(f_rgb, f_ir, f_spec, f_rgb, f_ir)

    def forward(self, rgb: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        """Raw head maps on the inference path."""
        fused, _ = self.fused_features(rgb, ir)
        return self.head(fused)

    def modality_weights(self, rgb: torch.Tensor, ir: torch.Tensor) -> ModalityWeights:
        """Per-channel (w_rgb, w_ir) the inference path would apply."""
        if not self.use_prompt or self.fusion.mode != "pcdf":
            raise ValueError("this model has no condition-driven modality weights")
        f_rgb, f_ir = self.backbone(rgb, ir)
        return self.fusion.weights(self.decoupler.spec(f_rgb, f_ir))

    def training_losses(self, batch: Batch, stage: int) -> dict[str, torch.Tensor]:
        if stage not in STAGES:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        f_rgb, f_ir = self.backbone(batch.rgb if self.backbone.rgb is not None else None, batch.ir if self.backbone.ir is not None else None)
        ref = f_rgb if f_rgb is not None else f_ir
        targets = build_targets(batch.boxes, self._grid(ref), self.stride, ref.dtype)
        out: dict[str, torch.Tensor] = {}
        if self.modality != "both" or not self.use_prompt:
            if self.modality == "rgb":
                fused = f_rgb
            elif self.modality == "ir":
                fused = f_ir
            else:
                fused = self.fusion(f_rgb, f_ir, None)
            det = head_loss(self.head(fused), targets)
            out.update({f"det_{k}": v for k, v in det.items()})
            out["det"] = det["cls"] + det["reg"] + det["obj"]
            out["total"] = self.cfg.loss.det_weight * out["det"]
            return out
        if batch.conditions is None or any(c is None for c in batch.conditions):
            raise ValueError("condition labels are required for training")
        if stage == 1:
            prompts = self.prompter(f_rgb, f_ir, batch.conditions)
            cond = torch.sigmoid(prompts.embeddings)
            fused = self.fusion(f_rgb, f_ir, cond)
            det = head_loss(self.head(fused), targets)
            out.update({f"det_{k}": v for k, v in det.items()})
            out["det"] = det["cls"] + det["reg"] + det["obj"]
            out["total"] = self.cfg.loss.det_weight * out["det"]
            out["mask_mean"] = prompts.masks.detach().mean()
            return out
        bundle = self._decouple(f_rgb, f_ir)
        fused = self.fusion(bundle.f_inv_rgb, bundle.f_inv_ir, bundle.f_spec)
        det = head_loss(self.head(fused), targets)
        out.update({f"det_{k}": v for k, v in det.items()})
        out["det"] = det["cls"] + det["reg"] + det["obj"]
        lam1, lam2, lam3 = self.lambdas
        zero = out["det"].new_zeros(())
        l_dt = l_irr = l_dc = zero
        if lam1 > 0 and len(batch.conditions) >= self.cfg.detector.min_distill_batch:
            with torch.no_grad():
                target = torch.sigmoid(self.prompter(f_rgb.detach(), f_ir.detach(), batch.conditions).embeddings)
            l_dt = distillation_loss(bundle.f_spec, target.to(bundle.f_spec.dtype), self.cfg.loss.cmd_order)
        if lam2 > 0:
            l_irr = bundle_irrelevance_loss(bundle, self.decoupler)
        if lam3 > 0:
            l_dc = discrimination_loss(bundle, targets, head_loss_fn(self.head), self._unimodal(bundle.f_spec))
        br = decoupling_loss(l_dt, l_irr, l_dc, (lam1, lam2, lam3))
        out.update({"l_dt": l_dt, "l_irr": l_irr, "l_dc": l_dc})
        out["l_dec"] = br.l_dec if torch.is_tensor(br.l_dec) else zero
        out["total"] = self.cfg.loss.det_weight * out["det"] + self.cfg.loss.dec_weight * out["l_dec"]
        return out


def head_loss_fn(head: DetectionHead):
    def fn(features: torch.Tensor, targets: dict) -> dict:
        return head_loss(head(features), targets)

    return fn


def to_batch(samples: Sequence, dtype=torch.float32) -> Batch:
    import numpy as np

    rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).permute(0, 3, 1, 2).to(dtype) / 255.0
    ir = torch.from_numpy(np.stack([s.ir for s in samples]))[:, None].to(dtype) / 255.0
    return Batch(rgb, ir, [tuple(s.ir_boxes) for s in samples], [s.condition for s in samples])
