"""Invariant suite run by ``pcdf selftest``.

Each check returns a :class:`CheckResult`; :func:`run_all` runs them in order.
The whole suite takes well under two minutes on one CPU core.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .decouple import cmd_loss, distillation_loss, irrelevance_loss
from .evaluation import Detection, evaluate, rotated_iou
from .fusion import GatingProjection, gate_weights
from .prompt import (
    DEFAULT_TAU,
    PromptTemplate,
    apply_hard_gate,
    build_initial_prompt,
    build_sample_prompt,
)
from .schema import ConditionRecord, OrientedBox
from .synthgen import apply_homography, estimate_homography


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# -- helpers -----------------------------------------------------------------------


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    a = analytic.detach().reshape(-1).double()
    n = numeric.detach().reshape(-1).double()
    scale = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / scale).max())


def central_difference(fn: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-6, index=None) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. entries of ``x`` (in place perturbation)."""
    flat = x.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            out[k] = (hi - lo) / (2 * eps)
    return out


def point_in_box(px: np.ndarray, py: np.ndarray, box: np.ndarray) -> np.ndarray:
    cx, cy, w, h, t = box
    dx, dy = px - cx, py - cy
    c, s = math.cos(t), math.sin(t)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def monte_carlo_iou(a: np.ndarray, b: np.ndarray, n: int, rng: np.random.Generator) -> float:
    r = max(math.hypot(a[2], a[3]), math.hypot(b[2], b[3])) / 2
    x0, x1 = min(a[0], b[0]) - r, max(a[0], b[0]) + r
    y0, y1 = min(a[1], b[1]) - r, max(a[1], b[1]) + r
    px = rng.uniform(x0, x1, n)
    py = rng.uniform(y0, y1, n)
    ia, ib = point_in_box(px, py, a), point_in_box(px, py, b)
    inter = np.count_nonzero(ia & ib)
    union = np.count_nonzero(ia | ib)
    return inter / union if union else 0.0


def random_box_pair(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([0.0, 0.0, rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(-math.pi, math.pi)])
    b = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(-math.pi, math.pi)])
    return a, b


def micro_set() -> tuple[list[list[Detection]], list[list[OrientedBox]], float]:
    """Five images with hand-enumerated matches and their mAP@0.5.

    class 0 (3 GT), ranked: .9 TP, .8 TP (IoU 0.82), .7 FP (IoU 1/3), .5 FP (no GT), .3 TP
        -> AP = 2/3 * 1 + 1/3 * 3/5 = 13/15
    class 1 (2 GT), ranked: .95 TP, .6 TP, .4 FP (duplicate) -> AP = 1
    class 2: no GT, one stray detection -> excluded from the mean
    mAP = (13/15 + 1) / 2 = 14/15
    """

    def B(cx, cy, c):
        return OrientedBox(cx, cy, 10, 10, 0.0, c)

    def D(cx, cy, c, s):
        return Detection(B(cx, cy, c), s)

    gts = [
        [B(10, 10, 0)],
        [B(20, 20, 0), B(50, 50, 1)],
        [B(30, 30, 0)],
        [],
        [B(60, 60, 1)],
    ]
    dets = [
        [D(10, 10, 0, 0.9)],
        [D(21, 20, 0, 0.8), D(50, 50, 1, 0.6)],
        [D(35, 30, 0, 0.7), D(30, 30, 0, 0.3)],
        [D(40, 40, 0, 0.5), D(80, 80, 2, 0.2)],
        [D(60, 60, 1, 0.95), D(60, 60, 1, 0.4)],
    ]
    return dets, gts, 14 / 15


def tiny_condition(i: int) -> ConditionRecord:
    illum = ("Night", "Normal", "Overexposure", "Dim")[i % 4]
    return ConditionRecord(100.0 + 37 * i, 5.0 + 11 * i, "Noon" if i % 2 else "Night", "Sunny", illum, "Highway")


# -- checks ------------------------------------------------------------------------


def check_softmax_normalization(n: int = 1000, channels: int = 32, embed_dim: int = 512) -> CheckResult:
    torch.manual_seed(0)
    proj = GatingProjection(embed_dim, channels).double().eval()
    with torch.no_grad():
        for p in proj.parameters():
            p.normal_(0, 1.0)
        proj.net[0].running_mean.uniform_(0.2, 0.8)
        proj.net[0].running_var.uniform_(0.01, 0.1)
        w = gate_weights(torch.rand(n, embed_dim, dtype=torch.float64), proj)
    err = float((w.w_rgb + w.w_ir - 1).abs().max())
    ok = err <= 1e-6 and bool((w.w_rgb >= 0).all()) and bool((w.w_ir >= 0).all())
    return CheckResult("modality weights sum to one", ok, f"max |w_rgb + w_ir - 1| = {err:.2e} over {n} vectors")


def check_cmd_axioms() -> CheckResult:
    g = torch.Generator().manual_seed(1)
    x = torch.rand(16, 8, generator=g, dtype=torch.float64)
    y = torch.rand(16, 8, generator=g, dtype=torch.float64)
    ident = float(cmd_loss(x, x.clone()))
    sym = abs(float(cmd_loss(x, y)) - float(cmd_loss(y, x)))
    nonneg = all(float(cmd_loss(torch.rand(8, 4, generator=g, dtype=torch.float64), torch.rand(8, 4, generator=g, dtype=torch.float64))) >= 0 for _ in range(50))
    single = float(cmd_loss(torch.zeros(1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64)))
    ok = ident == 0.0 and sym <= 1e-12 and nonneg and single == 1.0
    return CheckResult("CMD axioms", ok, f"identity={ident}, |asym|={sym:.1e}, non-negative={nonneg}, singleton={single}")


def check_gradients() -> CheckResult:
    g = torch.Generator().manual_seed(2)
    errs = {}
    f = (0.1 + 0.8 * torch.rand(6, 12, generator=g, dtype=torch.float64)).requires_grad_()
    t = 0.1 + 0.8 * torch.rand(6, 12, generator=g, dtype=torch.float64)
    distillation_loss(f, t).backward()
    errs["L_dt"] = max_rel_error(f.grad, central_difference(lambda: distillation_loss(f, t), f))

    fr = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    fi = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
    proj = torch.randn(2, 4, generator=g, dtype=torch.float64, requires_grad=True)
    irrelevance_loss(fr, fi, proj).backward()
    errs["L_irr"] = max(
        max_rel_error(fr.grad, central_difference(lambda: irrelevance_loss(fr, fi, proj), fr)),
        max_rel_error(proj.grad, central_difference(lambda: irrelevance_loss(fr, fi, proj), proj)),
    )

    torch.manual_seed(3)
    gp = GatingProjection(10, 4, hidden=8).double()
    with torch.no_grad():
        gp.net[-1].weight.normal_(0, 0.5)
    c = torch.rand(5, 10, generator=g, dtype=torch.float64, requires_grad=True)
    r = torch.randn(5, 4, generator=g, dtype=torch.float64)

    def gate_obj():
        w = gate_weights(c, gp)
        return (w.w_rgb * r).sum()

    gate_obj().backward()
    errs["gating"] = max_rel_error(c.grad, central_difference(gate_obj, c))

    errs["end-to-end"] = end_to_end_gradient_error()
    ok = all(v < 1e-4 for k, v in errs.items() if k != "end-to-end") and errs["end-to-end"] < 1e-3
    return CheckResult("gradient checks (fp64)", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def end_to_end_gradient_error(n_params: int = 32, seed: int = 0) -> float:
    """Stage-2 total loss of a C=8, 16x16 model vs central differences on a random parameter subset."""
    from .config import build_config
    from .detect.model import Batch, PCDFDetector

    cfg = build_config(
        {
            "seed": seed,
            "detector": {"image_size": [16, 16], "channels": 8, "num_classes": 3, "head_hidden": 8, "min_distill_batch": 4},
            "fusion": {"hidden": 16},
            "prompt": {"hidden": 16},
        }
    )
    torch.manual_seed(seed)
    model = PCDFDetector(cfg).double()
    with torch.no_grad():
        model.fusion.gating.net[-1].weight.normal_(0, 0.1)
    g = torch.Generator().manual_seed(seed + 1)
    B = 4
    rgb = torch.rand(B, 3, 16, 16, generator=g, dtype=torch.float64)
    ir = torch.rand(B, 1, 16, 16, generator=g, dtype=torch.float64)
    boxes = [(OrientedBox(5.0 + 2 * i, 6.0 + i, 6.0, 4.0, 0.0, i % 3),) for i in range(B)]
    batch = Batch(rgb, ir, boxes, [tiny_condition(i) for i in range(B)])
    model.train()

    def loss():
        return model.training_losses(batch, 2)["total"]

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    picks = []
    for _ in range(n_params):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        picks.append((p, int(torch.randint(p.numel(), (1,), generator=g))))
    analytic = torch.tensor([float(p.grad.view(-1)[i]) for p, i in picks], dtype=torch.float64)
    numeric = torch.tensor([float(central_difference(loss, p, 1e-6, [i])[0]) for p, i in picks], dtype=torch.float64)
    return max_rel_error(analytic, numeric, floor=1e-6)


def check_prompt_gate() -> CheckResult:
    rec = ConditionRecord(150.0, 20.0, "Night", "Night", "Night", "Highway")
    mask = apply_hard_gate(torch.full((1, 6), 1 / 6, dtype=torch.float64), DEFAULT_TAU)
    kept = int(mask.sum())
    tpl = PromptTemplate()
    same = build_sample_prompt(rec, tpl, [1] * 6).encode() == build_initial_prompt(rec, tpl).encode()
    ok = kept == 6 and same
    return CheckResult("prompt gate", ok, f"uniform probabilities keep {kept}/6 blocks; all-ones mask byte-identical={same}")


def check_rotated_iou(pairs: int = 200, samples: int = 1_000_000) -> CheckResult:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(pairs):
        a, b = random_box_pair(rng)
        worst = max(worst, abs(rotated_iou(a, b) - monte_carlo_iou(a, b, samples, rng)))
    analytic = abs(rotated_iou([0, 0, 1, 1, 0], [0.5, 0, 1, 1, 0]) - 1 / 3)
    ok = worst < 0.01 and analytic <= 1e-9
    return CheckResult("rotated IoU", ok, f"max |IoU - MC| = {worst:.4f} over {pairs} pairs; 1/3 case error {analytic:.1e}")


def check_homography() -> CheckResult:
    rng = np.random.default_rng(5)
    h = np.array([[1.05, 0.04, 3.0], [-0.03, 0.97, -2.0], [1e-4, -2e-4, 1.0]])
    src = rng.uniform(0, 64, (8, 2))
    est = estimate_homography(src, apply_homography(h, src))
    err = float(np.abs(est.matrix - h).max())
    return CheckResult("homography round trip", err < 1e-6, f"max entry error {err:.1e}")


def check_ap_micro_set() -> CheckResult:
    dets, gts, expected = micro_set()
    _, m, _ = evaluate(dets, gts, num_classes=3)
    ok = m is not None and math.isclose(m, expected, rel_tol=0, abs_tol=1e-12)
    return CheckResult("AP micro-set", ok, f"mAP {m!r} vs hand-computed {expected!r}")


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_softmax_normalization,
    check_cmd_axioms,
    check_gradients,
    check_prompt_gate,
    check_rotated_iou,
    check_homography,
    check_ap_micro_set,
)


def run_all(echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        t = time.perf_counter()
        try:
            r = check()
        except Exception as e:  # noqa: BLE001 - a crashing check is a failing check
            r = CheckResult(check.__name__, False, f"raised {type(e).__name__}: {e}")
        r.seconds = time.perf_counter() - t
        results.append(r)
        if echo is not None:
            echo(r.line())
    return results
