import math

import numpy as np
import pytest
import torch

from pgsam.exceptions import ValidationError
from pgsam.fusion import (
    CrossSequenceAttention,
    CrossSequenceModule,
    SequenceFusion,
    cross_sequence_attention,
    refine_sequence,
)

f64 = dict(dtype=torch.float64)


def test_fusion_averages_identical_inputs():
    fusion = SequenceFusion(4, 8)
    E = torch.randn(2, 8, 5, 5)
    out = fusion([E, E, E, E])
    assert out.shape == (2, 8, 5, 5)
    assert torch.allclose(out, E, atol=1e-6)


@pytest.mark.parametrize("c", [1, 2, 4])
def test_fusion_shape_any_c(c):
    out = SequenceFusion(c, 8)(torch.randn(3, c, 8, 4, 4))
    assert out.shape == (3, 8, 4, 4)


def test_fusion_rejects_mixed_shapes():
    with pytest.raises(ValidationError):
        SequenceFusion(2, 8)([torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 5, 5)])


def test_zero_value_projection_gives_no_correction():
    g = torch.Generator().manual_seed(0)
    xf, xi = torch.randn(6, 4, generator=g, **f64), torch.randn(6, 4, generator=g, **f64)
    Wq, Wk = torch.randn(4, 4, generator=g, **f64), torch.randn(4, 4, generator=g, **f64)
    A, _ = cross_sequence_attention(xf, xi, Wq, Wk, torch.zeros(4, 4, **f64))
    assert torch.equal(A, torch.zeros_like(A))
    assert torch.equal(refine_sequence(xi, A), xi)


def test_single_token_softmax_is_one():
    xf, xi = torch.randn(1, 3, **f64), torch.randn(1, 3, **f64)
    Wv = torch.randn(3, 2, **f64)
    A, attn = cross_sequence_attention(xf, xi, torch.eye(3, **f64), torch.eye(3, **f64), Wv)
    assert attn.item() == 1.0
    assert torch.allclose(A, xi @ Wv)
    A_lit, _ = cross_sequence_attention(xf, xi, torch.eye(3, **f64), torch.eye(3, **f64), Wv[:1], value_mode="literal")
    assert torch.equal(A_lit, Wv[:1])


def test_two_token_weights_match_scalar_oracle():
    xf = torch.tensor([[1.0], [-2.0]], **f64)
    xi = torch.tensor([[0.5], [3.0]], **f64)
    one = torch.ones(1, 1, **f64)
    _, attn = cross_sequence_attention(xf, xi, one, one, one, d_k=1)
    for r in range(2):
        logits = [xf[r, 0].item() * xi[c, 0].item() for c in range(2)]
        z = sum(math.exp(v) for v in logits)
        for c in range(2):
            assert abs(attn[r, c].item() - math.exp(logits[c]) / z) < 1e-9


def test_attention_rows_sum_to_one():
    g = torch.Generator().manual_seed(3)
    xf, xi = torch.randn(2, 49, 16, generator=g), torch.randn(2, 49, 16, generator=g)
    W = [torch.randn(16, 16, generator=g) for _ in range(3)]
    _, attn = cross_sequence_attention(xf, xi, *W)
    assert (attn.sum(-1) - 1).abs().max() <= 1e-6


def test_non_finite_logits_raise():
    xf = torch.full((2, 2), float("inf"))
    with pytest.raises(FloatingPointError):
        cross_sequence_attention(xf, xf, torch.eye(2), torch.eye(2), torch.eye(2))


def test_refine_additivity():
    x, A = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(refine_sequence(refine_sequence(x, A), A), x + A + A)
    assert torch.equal(refine_sequence(x, torch.zeros_like(A)), x)
    assert torch.equal((refine_sequence(x, A) - x).abs(), ((x + A) - x).abs())


def test_refine_jacobian_has_identity_path():
    g = torch.Generator().manual_seed(0)
    xf = torch.randn(3, 2, generator=g, **f64)
    xi = torch.randn(3, 2, generator=g, **f64)
    Wq, Wk, Wv = (torch.randn(2, 2, generator=g, **f64) * 0.1 for _ in range(3))

    def f(x):
        A, _ = cross_sequence_attention(xf, x, Wq, Wk, Wv)
        return refine_sequence(x, A)

    eps = 1e-6
    base = xi.reshape(-1)
    jac = np.zeros((6, 6))
    for j in range(6):
        d = torch.zeros(6, **f64)
        d[j] = eps
        jac[:, j] = ((f((base + d).view(3, 2)) - f((base - d).view(3, 2))).reshape(-1) / (2 * eps)).numpy()
    # The attention term is small; the diagonal is dominated by the identity path.
    assert np.all(np.abs(np.diag(jac) - 1) < 0.2)
    analytic = torch.autograd.functional.jacobian(lambda x: f(x.view(3, 2)).reshape(-1), base).numpy()
    np.testing.assert_allclose(jac, analytic, atol=1e-8)


def test_cross_attention_gradients(fd_error):
    g = torch.Generator().manual_seed(4)
    xf = torch.randn(4, 3, generator=g, **f64)
    xi = torch.randn(4, 3, generator=g, **f64, requires_grad=True)
    params = [torch.randn(3, 3, generator=g, **f64, requires_grad=True) for _ in range(3)]

    def loss():
        A, _ = cross_sequence_attention(xf, xi, *params)
        return (refine_sequence(xi, A) ** 2).sum()

    assert fd_error(loss, [xi, *params]) < 1e-4


def test_module_permutation_equivariance():
    torch.manual_seed(0)
    mod = CrossSequenceModule(3, 8, 4).double()
    with torch.no_grad():
        mod.attention.Wv.normal_()
    emb = torch.randn(1, 3, 8, 4, 4, **f64)
    perm = [2, 0, 1]
    fused, refined = mod(emb)
    fused_p, refined_p = mod(emb[:, perm])
    assert torch.allclose(fused, fused_p, atol=1e-12)
    assert torch.allclose(refined[:, perm], refined_p, atol=1e-12)


def test_multihead_and_literal_modes_shapes():
    emb = torch.randn(2, 8, 4, 4)
    for attn in (CrossSequenceAttention(8, heads=2), CrossSequenceAttention(8, n_tokens=16, value_mode="literal")):
        assert attn(emb, emb).shape == emb.shape
