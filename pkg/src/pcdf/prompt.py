"""Sample-specific condition prompts.

A prompt is a subject sentence followed by one block per condition attribute.  A
small gate network looks at the pooled visual features together with the
embedding of the full prompt and keeps only the attributes whose probability
clears ``tau``.  The surviving prompt is embedded by a frozen text encoder.

This module is a training-time component.  :func:`inference_guard` turns every
entry point into a hard error so inference code can prove it never touches it.
"""

from __future__ import annotations

import contextlib
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Protocol, Sequence, runtime_checkable

import torch
from torch import nn

from .schema import SCHEMA, ConditionRecord, altitude_bucket, angle_bucket

NUM_ATTRIBUTES = len(SCHEMA)
DEFAULT_TAU = 0.15
EMBED_DIM = 512

DEFAULT_SUBJECT = "An aerial image pair of vehicles captured"
DEFAULT_PREFIXES = (
    "at an altitude of",
    "at a camera pitch angle of",
    "during",
    "in weather",
    "under illumination",
    "over scenario",
)


class PromptConfigError(ValueError):
    pass


class PromptInvokedDuringInference(RuntimeError):
    pass


@dataclass
class _Guard:
    inference: bool = False
    calls: int = 0


_GUARD = _Guard()


def invocation_count() -> int:
    """Number of prompt-module entry points executed since the last reset."""
    return _GUARD.calls


def reset_invocation_count() -> None:
    _GUARD.calls = 0


@contextlib.contextmanager
def inference_guard() -> Iterator[None]:
    prev = _GUARD.inference
    _GUARD.inference = True
    try:
        yield
    finally:
        _GUARD.inference = prev


def training_only(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if _GUARD.inference:
            raise PromptInvokedDuringInference(f"{fn.__qualname__} called on an inference path")
        _GUARD.calls += 1
        return fn(*args, **kwargs)

    return wrapper


@dataclass(frozen=True)
class PromptTemplate:
    subject: str = DEFAULT_SUBJECT
    prefixes: tuple[str, ...] = DEFAULT_PREFIXES

    def __post_init__(self) -> None:
        if len(self.prefixes) != NUM_ATTRIBUTES:
            raise PromptConfigError(f"template has {len(self.prefixes)} prefixes, schema has {NUM_ATTRIBUTES} attributes")


def _fmt_number(v: float) -> str:
    return f"{v:g}"


def render_blocks(record: ConditionRecord, template: PromptTemplate) -> list[str]:
    """One ``prefix + value`` block per attribute, in schema order."""
    if len(template.prefixes) != NUM_ATTRIBUTES:
        raise PromptConfigError(f"template has {len(template.prefixes)} prefixes, schema has {NUM_ATTRIBUTES} attributes")
    values = [
        f"{_fmt_number(record.altitude_m)} m {altitude_bucket(record.altitude_m)}",
        f"{_fmt_number(record.angle_deg)} degrees {angle_bucket(record.angle_deg)}",
        record.time,
        record.weather,
        record.illumination,
        record.scenario,
    ]
    return [f"{p} {v}".strip() for p, v in zip(template.prefixes, values)]


def _join(subject: str, blocks: Sequence[str]) -> str:
    return " ".join(part for part in [subject, *blocks] if part)


@training_only
def build_initial_prompt(record: ConditionRecord, template: PromptTemplate = PromptTemplate()) -> str:
    return _join(template.subject, render_blocks(record, template))


@training_only
def build_sample_prompt(record: ConditionRecord, template: PromptTemplate, mask: Sequence[int]) -> str:
    """Drop every block whose gate is 0; the subject is always kept."""
    mask = [int(round(float(g))) for g in mask]
    if len(mask) != NUM_ATTRIBUTES:
        raise PromptConfigError(f"mask has {len(mask)} entries, expected {NUM_ATTRIBUTES}")
    blocks = render_blocks(record, template)
    return _join(template.subject, [b for b, g in zip(blocks, mask) if g == 1])


# --- text encoders ---------------------------------------------------------------


@runtime_checkable
class TextEncoderPort(Protocol):
    dim: int
    is_frozen: bool

    def encode(self, text: str) -> torch.Tensor: ...


class HashTextEncoder(nn.Module):
    """Deterministic training-free text encoder.

    Each whitespace token maps to a fixed Gaussian vector seeded from its hash;
    a sentence is the mean token vector passed through a fixed orthogonal matrix.
    The empty string encodes to zeros.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.is_frozen = True
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(dim, dim, generator=g, dtype=torch.float64))
        self.register_buffer("rotation", q, persistent=False)
        self._token_cache: dict[str, torch.Tensor] = {}
        self._stats_cache: dict[str, tuple[torch.Tensor, int]] = {}

    def token_vector(self, token: str) -> torch.Tensor:
        v = self._token_cache.get(token)
        if v is None:
            h = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
            g = torch.Generator().manual_seed(int.from_bytes(h, "little") & ((1 << 63) - 1))
            v = torch.randn(self.dim, generator=g, dtype=torch.float64)
            self._token_cache[token] = v
        return v

    def token_stats(self, text: str) -> tuple[torch.Tensor, int]:
        """Sum of token vectors and token count."""
        hit = self._stats_cache.get(text)
        if hit is not None:
            return hit
        toks = text.split()
        if toks:
            out = (torch.stack([self.token_vector(t) for t in toks]).sum(0), len(toks))
        else:
            out = (torch.zeros(self.dim, dtype=torch.float64), 0)
        self._stats_cache[text] = out
        return out

    def encode(self, text: str) -> torch.Tensor:
        total, n = self.token_stats(text)
        if n == 0:
            return torch.zeros(self.dim, dtype=torch.float64)
        return self.rotation @ (total / n)

    def encode_masked(self, subject: str, blocks: Sequence[str], mask: torch.Tensor) -> torch.Tensor:
        """Embedding of ``subject`` plus the blocks kept by ``mask``, differentiable in ``mask``.

        For a binary mask the value equals ``encode`` of the joined string, since
        the sentence vector is a token mean.
        """
        s_sum, s_n = self.token_stats(subject)
        stats = [self.token_stats(b) for b in blocks]
        b_sum = torch.stack([s for s, _ in stats]).to(mask.dtype)
        b_n = torch.tensor([n for _, n in stats], dtype=mask.dtype)
        total = s_sum.to(mask.dtype) + mask @ b_sum
        count = s_n + (mask * b_n).sum()
        if float(count.detach()) == 0.0:
            return torch.zeros(self.dim, dtype=mask.dtype)
        return self.rotation.to(mask.dtype) @ (total / count)


def encode_prompt(prompt: str, encoder: TextEncoderPort) -> torch.Tensor:
    try:
        with torch.set_grad_enabled(not getattr(encoder, "is_frozen", True)):
            return encoder.encode(prompt)
    except Exception as e:
        raise RuntimeError(f"text encoder failed on prompt {prompt!r}: {e}") from e


def encode_masked(encoder: TextEncoderPort, subject: str, blocks: Sequence[str], mask: torch.Tensor) -> torch.Tensor:
    """Embedding of the gated prompt whose gradient w.r.t. ``mask`` is defined.

    Encoders that are not decomposable get a first-order surrogate: the exact
    embedding of the hard prompt, plus per-block deltas scaled by ``mask - stop_grad(mask)``.
    """
    if hasattr(encoder, "encode_masked"):
        return encoder.encode_masked(subject, blocks, mask)
    hard = [int(round(float(g))) for g in mask.detach()]
    base = encode_prompt(_join(subject, [b for b, g in zip(blocks, hard) if g]), encoder).to(mask.dtype)
    out = base
    for n, b in enumerate(blocks):
        with_n = [bb for k, (bb, g) in enumerate(zip(blocks, hard)) if g or k == n]
        without_n = [bb for k, (bb, g) in enumerate(zip(blocks, hard)) if g and k != n]
        delta = encode_prompt(_join(subject, with_n), encoder) - encode_prompt(_join(subject, without_n), encoder)
        out = out + (mask[n] - mask[n].detach()) * delta.to(mask.dtype)
    return out


# --- hard gate -------------------------------------------------------------------


class GateNetwork(nn.Module):
    """Pooled visual features + prompt embedding -> attribute probabilities."""

    def __init__(self, channels: int, embed_dim: int = EMBED_DIM, hidden: int = 64, num_attributes: int = NUM_ATTRIBUTES):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels + embed_dim, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, num_attributes)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def logits(self, f_rgb: torch.Tensor, f_ir: torch.Tensor, init_embed: torch.Tensor) -> torch.Tensor:
        if f_rgb.shape != f_ir.shape:
            raise ValueError(f"feature shape mismatch: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
        pooled = torch.cat([f_rgb.amax(dim=(-2, -1)), f_ir.amax(dim=(-2, -1)), init_embed.to(f_rgb.dtype)], dim=-1)
        return self.fc2(self.act(self.fc1(pooled)))

    def forward(self, f_rgb: torch.Tensor, f_ir: torch.Tensor, init_embed: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(f_rgb, f_ir, init_embed), dim=-1)


@training_only
def gate_probabilities(f_rgb: torch.Tensor, f_ir: torch.Tensor, init_embed: torch.Tensor, net: GateNetwork) -> torch.Tensor:
    return net(f_rgb, f_ir, init_embed)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, probs, tau):
        return (probs >= tau).to(probs.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def apply_hard_gate(probs: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Binary mask ``probs >= tau`` whose backward pass is the identity on ``probs``.

    The forward value is exactly 0 or 1, so an all-kept mask reproduces the
    initial prompt embedding bit for bit.
    """
    return _StraightThrough.apply(probs, tau)


@dataclass
class PromptBatch:
    embeddings: torch.Tensor
    masks: torch.Tensor
    probs: torch.Tensor | None
    prompts: list[str] = field(default_factory=list)


class ConditionPrompter(nn.Module):
    """Gate network plus frozen encoder; yields one condition embedding per sample."""

    def __init__(
        self,
        channels: int,
        encoder: TextEncoderPort | None = None,
        template: PromptTemplate = PromptTemplate(),
        tau: float = DEFAULT_TAU,
        hidden: int = 64,
        tune: bool = True,
    ):
        super().__init__()
        self.encoder = encoder if encoder is not None else HashTextEncoder()
        self.template = template
        self.tau = tau
        self.tune = tune
        self.gate = GateNetwork(channels, self.encoder.dim, hidden)
        self._init_cache: dict[str, torch.Tensor] = {}

    def initial_embedding(self, record: ConditionRecord) -> tuple[str, torch.Tensor]:
        text = build_initial_prompt(record, self.template)
        emb = self._init_cache.get(text)
        if emb is None:
            emb = encode_prompt(text, self.encoder).detach()
            self._init_cache[text] = emb
        return text, emb

    @training_only
    def forward(self, f_rgb: torch.Tensor, f_ir: torch.Tensor, records: Sequence[ConditionRecord]) -> PromptBatch:
        if len(records) != f_rgb.shape[0]:
            raise ValueError(f"{len(records)} condition records for a batch of {f_rgb.shape[0]}")
        dtype = f_rgb.dtype
        texts, init = zip(*(self.initial_embedding(r) for r in records))
        init_embed = torch.stack(init).to(dtype)
        if self.tune:
            probs = gate_probabilities(f_rgb, f_ir, init_embed, self.gate)
            masks = apply_hard_gate(probs, self.tau)
        else:
            probs = None
            masks = torch.ones(len(records), NUM_ATTRIBUTES, dtype=dtype)
        embeds = []
        prompts = []
        for r, m in zip(records, masks):
            blocks = render_blocks(r, self.template)
            embeds.append(encode_masked(self.encoder, self.template.subject, blocks, m))
            prompts.append(_join(self.template.subject, [b for b, g in zip(blocks, m.detach()) if g > 0.5]))
        return PromptBatch(torch.stack(embeds).to(dtype), masks, probs, prompts)
