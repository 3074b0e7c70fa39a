import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pcdf.decouple import (
    ConditionSpecificEncoder,
    Decoupler,
    LossConfigError,
    cmd_loss,
    decouple_features,
    decoupling_loss,
    distillation_loss,
    irrelevance_loss,
)

torch.set_default_dtype(torch.float32)


def test_zero_projection_gives_half_everywhere():
    enc = ConditionSpecificEncoder(8)
    torch.nn.init.zeros_(enc.proj.weight)
    torch.nn.init.zeros_(enc.proj.bias)
    out = enc(torch.randn(3, 8, 5, 5), torch.randn(3, 8, 5, 5))
    assert out.shape == (3, 512)
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_spec_output_lies_in_unit_cube():
    out = ConditionSpecificEncoder(8)(torch.randn(4, 8, 6, 6) * 10, torch.randn(4, 8, 6, 6) * 10)
    assert bool((out >= 0).all() and (out <= 1).all())


def test_invariant_encoders_start_as_identity():
    d = Decoupler(8)
    f_rgb, f_ir = torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4)
    b = decouple_features(f_rgb, f_ir, d)
    assert torch.equal(b.f_inv_rgb, f_rgb) and torch.equal(b.f_inv_ir, f_ir)


def test_decoupler_rejects_mismatched_streams():
    with pytest.raises(ValueError):
        Decoupler(8)(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 5, 4))


def test_cmd_identity_is_exactly_zero():
    x = torch.rand(7, 16, dtype=torch.float64)
    assert cmd_loss(x, x).item() == 0.0


def test_cmd_singleton_case():
    assert cmd_loss(torch.zeros(1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64)).item() == 1.0


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_cmd_symmetric_and_non_negative(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, d, generator=g, dtype=torch.float64)
    y = torch.rand(n + 1, d, generator=g, dtype=torch.float64)
    a, b = cmd_loss(x, y).item(), cmd_loss(y, x).item()
    assert a >= 0
    assert abs(a - b) <= 1e-12


def test_cmd_rejects_out_of_range_and_bad_order():
    with pytest.raises(ValueError):
        cmd_loss(torch.tensor([[1.5]]), torch.tensor([[0.5]]))
    with pytest.raises(LossConfigError):
        cmd_loss(torch.rand(2, 2), torch.rand(2, 2), order=1)
    with pytest.raises(LossConfigError):
        cmd_loss(torch.rand(2, 2), torch.rand(2, 2), bounds=(1.0, 1.0))


def test_distillation_requires_matching_batches():
    with pytest.raises(ValueError):
        distillation_loss(torch.rand(3, 4), torch.rand(2, 4))


def test_irrelevance_one_by_one_case():
    # Single position, C=2: f=[1,2], g=[3,4] -> (1*3+2*4)^2 / 2 per modality.
    f = torch.tensor([1.0, 2.0], dtype=torch.float64).reshape(1, 2, 1, 1)
    g = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
    assert irrelevance_loss(f, torch.zeros_like(f), g).item() == pytest.approx(121 / 2)
    assert irrelevance_loss(f, f, g).item() == pytest.approx(121.0)


def test_irrelevance_zero_for_orthogonal_features():
    f = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    f[:, 0] = 1.0
    g = torch.tensor([[0.0, 5.0]], dtype=torch.float64)
    assert irrelevance_loss(f, f, g).item() == 0.0


def test_irrelevance_shape_check():
    with pytest.raises(ValueError):
        irrelevance_loss(torch.rand(1, 2, 2, 2), torch.rand(1, 2, 2, 2), torch.rand(1, 3))


def test_decoupling_loss_weights_and_zero_terms():
    b = decoupling_loss(torch.tensor(2.0), torch.tensor(3.0), torch.tensor(4.0), (0.5, 0.0, 1.0))
    assert float(b.l_dec) == pytest.approx(5.0)
    b = decoupling_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(1.0), (1.0, 0.0, 1.0))
    assert float(b.l_dec) == 2.0
    with pytest.raises(LossConfigError):
        decoupling_loss(1.0, 1.0, 1.0, (-1.0, 0.0, 0.0))
