import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pcdf.prompt import (
    ConditionPrompter,
    HashTextEncoder,
    PromptConfigError,
    PromptInvokedDuringInference,
    PromptTemplate,
    apply_hard_gate,
    build_initial_prompt,
    build_sample_prompt,
    encode_masked,
    encode_prompt,
    inference_guard,
    invocation_count,
    render_blocks,
)
from pcdf.schema import ConditionRecord


@pytest.fixture
def record():
    return ConditionRecord(150.0, 20.0, "Night", "Night", "Night", "Highway")


def test_uniform_probabilities_keep_every_attribute():
    probs = torch.full((4, 6), 1 / 6)
    assert torch.equal(apply_hard_gate(probs, 0.15), torch.ones(4, 6))


def test_gate_threshold_is_inclusive():
    probs = torch.tensor([[0.15, 0.1499, 0.2, 0.2, 0.2, 0.1001]])
    assert apply_hard_gate(probs, 0.15).tolist() == [[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]]


def test_straight_through_gradient_is_identity():
    p = torch.rand(3, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 6, dtype=torch.float64)
    (apply_hard_gate(p) * w).sum().backward()
    assert torch.equal(p.grad, w)


def test_all_ones_mask_reproduces_initial_prompt(record):
    t = PromptTemplate()
    assert build_sample_prompt(record, t, [1] * 6) == build_initial_prompt(record, t)


def test_zero_mask_keeps_only_subject(record):
    t = PromptTemplate()
    assert build_sample_prompt(record, t, [0] * 6) == t.subject


def test_mask_drops_exactly_the_gated_blocks(record):
    t = PromptTemplate()
    blocks = render_blocks(record, t)
    s = build_sample_prompt(record, t, [1, 0, 1, 0, 1, 0])
    assert s == " ".join([t.subject, blocks[0], blocks[2], blocks[4]])


def test_template_must_match_schema_length():
    with pytest.raises(PromptConfigError):
        PromptTemplate(prefixes=("a", "b"))
    with pytest.raises(PromptConfigError):
        build_sample_prompt(ConditionRecord(100, 10, "Morning", "Sunny", "Normal", "Road"), PromptTemplate(), [1, 1])


def test_hash_encoder_is_deterministic_and_frozen():
    a, b = HashTextEncoder(seed=0), HashTextEncoder(seed=0)
    assert torch.equal(a.encode("a red car"), b.encode("a red car"))
    assert a.encode("").abs().sum() == 0
    assert not any(p.requires_grad for p in a.parameters())


@given(st.lists(st.integers(0, 1), min_size=6, max_size=6))
def test_masked_encoding_matches_string_encoding(mask):
    rec = ConditionRecord(200.0, 45.0, "Noon", "Sunny", "Overexposure", "Road")
    t = PromptTemplate()
    enc = HashTextEncoder()
    blocks = render_blocks(rec, t)
    soft = encode_masked(enc, t.subject, blocks, torch.tensor(mask, dtype=torch.float64))
    hard = encode_prompt(build_sample_prompt(rec, t, mask), enc)
    assert torch.allclose(soft, hard, atol=1e-12)


def test_surrogate_for_opaque_encoder_matches_hard_value(record):
    class Opaque:
        dim = 512
        is_frozen = True

        def __init__(self):
            self.inner = HashTextEncoder()

        def encode(self, text):
            return self.inner.encode(text)

    t = PromptTemplate()
    blocks = render_blocks(record, t)
    m = torch.tensor([1, 0, 1, 1, 0, 1], dtype=torch.float64, requires_grad=True)
    out = encode_masked(Opaque(), t.subject, blocks, m)
    assert torch.allclose(out, HashTextEncoder().encode_masked(t.subject, blocks, m.detach()), atol=1e-12)
    out.sum().backward()
    assert m.grad is not None and torch.isfinite(m.grad).all()


def test_prompter_forward_counts_and_guard(record):
    p = ConditionPrompter(8)
    f = torch.randn(2, 8, 4, 4)
    before = invocation_count()
    out = p(f, f.clone(), [record, record])
    assert out.embeddings.shape == (2, 512)
    assert invocation_count() > before
    with inference_guard(), pytest.raises(PromptInvokedDuringInference):
        p(f, f, [record, record])


def test_untuned_prompter_keeps_full_prompt(record):
    p = ConditionPrompter(8, tune=False)
    f = torch.randn(1, 8, 4, 4)
    out = p(f, f, [record])
    assert out.probs is None
    assert out.prompts[0] == build_initial_prompt(record)
