import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pcdf.fusion import FUSION_MODES, FusionBlock, GatingProjection, fuse, gate_weights, pair_softmax


@given(st.integers(1, 16), st.integers(0, 10_000), st.floats(0.1, 100))
def test_pair_softmax_sums_to_one(c, seed, scale):
    g = torch.Generator().manual_seed(seed)
    w = pair_softmax(torch.randn(5, 2 * c, generator=g, dtype=torch.float64) * scale, c)
    assert torch.allclose(w.w_rgb + w.w_ir, torch.ones(5, c, dtype=torch.float64), atol=1e-12)
    assert bool((w.w_rgb >= 0).all() and (w.w_ir >= 0).all())


def test_pair_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        pair_softmax(torch.tensor([[0.0, float("nan")]]), 1)


def test_zero_init_gate_is_balanced():
    gp = GatingProjection(512, 8)
    w = gate_weights(torch.rand(4, 512), gp)
    assert torch.equal(w.w_rgb, torch.full((4, 8), 0.5))


def test_fuse_layout():
    a, b = torch.ones(1, 2, 3, 3), 2 * torch.ones(1, 2, 3, 3)
    w = pair_softmax(torch.zeros(1, 4), 2)
    out = fuse(a, b, w)
    assert out.shape == (1, 4, 3, 3)
    assert torch.equal(out[:, :2], 0.5 * a) and torch.equal(out[:, 2:], 0.5 * b)


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_mode_produces_declared_channels(mode):
    block = FusionBlock(mode, 8).eval()
    f = torch.randn(2, 8, 4, 4)
    out = block(f, f, torch.rand(2, 512))
    assert out.shape == (2, block.out_channels, 4, 4)


def test_condition_is_required_where_used():
    with pytest.raises(ValueError):
        FusionBlock("pcdf", 4)(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2), None)
    out = FusionBlock("channel_attention", 4)(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2), None)
    assert out.shape == (1, 8, 2, 2)


def test_unknown_mode():
    with pytest.raises(ValueError):
        FusionBlock("max", 4)


def test_weights_only_for_pcdf_mode():
    with pytest.raises(ValueError):
        FusionBlock("add", 4).weights(torch.rand(1, 512))
