import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ppt.transfer import (AlignmentHeads, Projection, alignment_losses, conditional_loss, marginal_loss, project,
                          state_bounds)
from ppt.twin import DigitalTwin, ModelConfig
from ppt.attention import AttentionConfig

finite = st.floats(-20, 20, allow_nan=False)


def test_projection_examples():
    W, b = torch.zeros(3, 4, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)
    assert torch.all(project(torch.randn(5, 4, dtype=torch.float64), W, b) == 0)
    torch.manual_seed(0)
    W, b = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    H = torch.randn(50, 4, dtype=torch.float64)
    assert project(H, W, b).abs().max() < 1
    torch.testing.assert_close(project(H, -W, -b), -project(H, W, b))
    with pytest.raises(ValueError):
        project(torch.randn(2, 5), W, b)
    p = Projection(4, 3).double()
    torch.testing.assert_close(p(H), project(H, p.linear.weight, p.linear.bias))


def test_marginal_loss_hand_value():
    # logits chosen so the softmax rows are [0.5, 0.5] and [0.25, 0.75]
    H_S = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    H_T = torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert marginal_loss(H_S, H_T).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)


def test_marginal_identity_and_shape_check():
    A = torch.randn(4, 6, 3)
    assert marginal_loss(A, A).item() == 0.0
    with pytest.raises(ValueError):
        marginal_loss(A, A[:, :5])


@settings(max_examples=200)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_marginal_nonnegative(a, b):
    assert marginal_loss(torch.tensor(a), torch.tensor(b)).item() >= -1e-15


def test_conditional_examples():
    S = torch.tensor([[2.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    T = torch.zeros(3, 2, dtype=torch.float64)
    assert conditional_loss(S, T).item() == pytest.approx(1.0)
    assert conditional_loss(S, S).item() == 0.0
    torch.testing.assert_close(conditional_loss(S.flip(0), T), conditional_loss(S, T))
    with pytest.raises(ValueError):
        conditional_loss(S[:0], T)
    with pytest.raises(ValueError):
        conditional_loss(S, torch.zeros(2, 3))


def test_conditional_gradient_finite_at_zero():
    A = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    loss = conditional_loss(A, A.detach().clone())
    (g,) = torch.autograd.grad(loss, A)
    assert torch.isfinite(g).all()


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_conditional_symmetric(a, b):
    a, b = torch.tensor(a), torch.tensor(b)
    assert abs(conditional_loss(a, b).item() - conditional_loss(b, a).item()) < 1e-9


def _cfg(proj):
    return ModelConfig(AttentionConfig(8, 2, 16, 1), n_features=4, gru_hidden=8, state_dim=4, bins=5,
                       window=4, proj_dim=proj)


def test_same_twin_same_batch_aligns_to_zero():
    torch.manual_seed(1)
    cfg = _cfg(6)
    twin = DigitalTwin(cfg).double()
    heads = AlignmentHeads(cfg).double()
    X = torch.randn(5, 4, 6, dtype=torch.float64)
    out = twin(X)
    mar, cond = alignment_losses(out, out, heads)
    assert mar.item() == 0.0 and cond.item() == 0.0


@pytest.mark.parametrize("proj", [6, 12])
def test_alignment_nonnegative_for_any_width(proj):
    torch.manual_seed(2)
    cfg = _cfg(proj)
    s, t = DigitalTwin(cfg).double(), DigitalTwin(cfg).double()
    heads = AlignmentHeads(cfg).double()
    mar, cond = alignment_losses(s(torch.randn(3, 4, 6, dtype=torch.float64)),
                                 t(torch.randn(3, 4, 6, dtype=torch.float64)), heads)
    assert mar.item() >= 0 and cond.item() >= 0


def test_heads_are_unshared_copies():
    heads = AlignmentHeads(_cfg(6))
    torch.testing.assert_close(heads.tm.linear.weight, heads.sm.linear.weight)
    assert heads.tm.linear.weight.data_ptr() != heads.sm.linear.weight.data_ptr()
    assert len(list(heads.parameters())) == 12


def test_state_bounds_widen_constant_columns():
    lo, hi = state_bounds(np.array([[1.0, 2.0], [3.0, 2.0]]))
    np.testing.assert_array_equal(lo, [1.0, 1.5])
    np.testing.assert_array_equal(hi, [3.0, 2.5])
