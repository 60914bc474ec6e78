import numpy as np
import pytest
import torch

from pgsam.decoder import (
    HierarchicalMaskDecoder,
    PromptEncoder,
    SegmentationOutput,
    VarianceTable,
    build_variance_table,
    cmattn_perturb,
    encode_prompts,
    gated_attention,
    lmca,
)
from pgsam.exceptions import ValidationError
from pgsam.text import PromptSet

f64 = dict(dtype=torch.float64)


def test_prompt_encoding_deterministic_and_distinct():
    enc = PromptEncoder(32, 224)
    a = PromptSet((100.0, 50.0), (90.0, 40.0, 110.0, 60.0))
    b = PromptSet((100.0, 50.0), (90.0, 40.0, 110.0, 60.0))
    assert torch.equal(encode_prompts(a, enc), encode_prompts(b, enc))
    center = encode_prompts(PromptSet((111.5, 111.5), (111.5, 111.5, 111.5, 111.5)), enc)
    corner = encode_prompts(PromptSet((0.0, 0.0), (0.0, 0.0, 0.0, 0.0)), enc)
    assert (center[0] - corner[0]).norm() > 0


def test_degenerate_box_corners_differ_only_by_type():
    enc = PromptEncoder(32, 224)
    tokens = encode_prompts(PromptSet((20.0, 30.0), (20.0, 30.0, 20.0, 30.0)), enc)
    diff = tokens[1] - tokens[2]
    assert torch.allclose(diff, enc.type_embed.weight[1] - enc.type_embed.weight[2])


def test_prompt_out_of_bounds():
    enc = PromptEncoder(32, 224)
    with pytest.raises(ValidationError):
        enc(torch.tensor([[230.0, 5, 0, 0, 5, 5]]))


def test_dense_positional_injective():
    pe = PromptEncoder(32, 224).dense_positional(14)
    assert pe.shape == (196, 32)
    d = torch.cdist(pe, pe) + torch.eye(196) * 10
    assert d.min() > 0


def test_variance_table_ratios():
    balanced = np.zeros((4, 4), np.uint8)
    balanced[:2] = 1
    t = build_variance_table([balanced])
    assert t.var[0] == t.var[1] == pytest.approx(0.1)
    m = np.zeros((10, 10), np.uint8)
    m[0, 0] = 1
    t = build_variance_table([m])
    assert t.var[1] / t.var[0] == pytest.approx(99.0)
    assert t.var.max() == pytest.approx(0.1)
    again = build_variance_table([m])
    np.testing.assert_array_equal(again.var, t.var)


def test_variance_table_missing_class_and_roundtrip(tmp_path):
    with pytest.warns(UserWarning):
        t = build_variance_table([np.zeros((3, 3), np.uint8)])
    assert t.var[1] == 0.1 and t.warnings
    t.save(tmp_path / "var.json")
    loaded = VarianceTable.load(tmp_path / "var.json")
    np.testing.assert_array_equal(loaded.var, t.var)
    np.testing.assert_array_equal(loaded.class_counts, t.class_counts)


def test_cmattn_zero_variance_and_eval_passthrough():
    X = torch.randn(2, 5, 3)
    gt = torch.randint(0, 2, (2, 5))
    table = VarianceTable(np.zeros(2), np.array([5, 5]))
    assert torch.equal(cmattn_perturb(X, gt, table, True), X)
    big = VarianceTable(np.array([9.0, 9.0]), np.array([5, 5]))
    assert cmattn_perturb(X, gt, big, False) is X


def test_cmattn_variance_monte_carlo():
    table = VarianceTable(np.array([0.0, 4.0]), np.array([1, 1]))
    gt = torch.tensor([[0, 1, 1, 0]])
    X = torch.zeros(1, 4, 1, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    draws = torch.stack([cmattn_perturb(X, gt, table, True, gen) for _ in range(50_000)])
    lesion = draws[:, 0, 1:3, 0].reshape(-1)
    assert abs(lesion.var().item() - 4.0) / 4.0 < 0.05
    assert torch.equal(draws[:, 0, [0, 3], 0], torch.zeros(50_000, 2, dtype=torch.float64))


def test_cmattn_rejects_unknown_class():
    table = VarianceTable(np.array([0.1, 0.1]), np.array([1, 1]))
    with pytest.raises(ValidationError):
        cmattn_perturb(torch.zeros(1, 2, 3), torch.tensor([[0, 2]]), table, True)


def _qkvx(seed=0, nq=3, nk=5, d=4):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, d, generator=g, **f64) for n in (nq, nk, nk, nq)]


def test_lmca_zero_gate_identity_and_unit_gate():
    Q, K, V, X = _qkvx()
    assert torch.equal(lmca(X, torch.zeros(5, **f64), K, Q, V), X)
    plain = torch.softmax(Q @ K.T / 2.0, dim=-1) @ V + X
    assert torch.allclose(lmca(X, torch.ones(5, **f64), K, Q, V), plain, atol=1e-12)


def test_lmca_gate_linearity():
    Q, K, V, X = _qkvx(1)
    full = lmca(X, torch.ones(5, **f64), K, Q, V) - X
    half = lmca(X, torch.full((5,), 0.5, **f64), K, Q, V) - X
    assert (half - 0.5 * full).abs().max() <= 1e-9
    g = torch.rand(5, generator=torch.Generator().manual_seed(2), **f64)
    assert torch.allclose(lmca(X, g * 0.3, K, Q, V) - X, 0.3 * (lmca(X, g, K, Q, V) - X), atol=1e-12)


def test_lmca_rejects_out_of_range_gate():
    Q, K, V, X = _qkvx()
    with pytest.raises(ValidationError):
        lmca(X, torch.full((5,), 1.5, **f64), K, Q, V)


def test_lmca_gradients(fd_error):
    g = torch.Generator().manual_seed(5)
    Q, K, V, X = (t.requires_grad_() for t in _qkvx(5, 4, 6, 3))
    M = torch.rand(6, generator=g, **f64).requires_grad_()
    assert fd_error(lambda: (lmca(X, M, K, Q, V) ** 2).sum(), [Q, K, V, X, M]) < 1e-4


def test_gated_attention_matches_module_broadcast():
    Q, K, V, _ = _qkvx()
    M = torch.rand(5, **f64)
    out = gated_attention(Q[None], K[None], V[None], M[None])
    assert torch.allclose(out[0], gated_attention(Q, K, V, M))


def test_hierarchical_decoder_eval_deterministic_and_final_average():
    torch.manual_seed(0)
    dec = HierarchicalMaskDecoder(32, 14, 224, depth=1, heads=2)
    pe = PromptEncoder(32, 224)
    img = torch.randn(2, 32, 14, 14)
    prompts = pe(torch.tensor([[50.0, 60, 40, 50, 60, 70]] * 2))
    with torch.no_grad():
        a = dec(img, pe.dense_positional(14), prompts)
        b = dec(img, pe.dense_positional(14), prompts)
    assert torch.equal(a.prior_logits, b.prior_logits) and torch.equal(a.refined_logits, b.refined_logits)
    assert a.prior_logits.shape == (2, 224, 224)
    out = SegmentationOutput(a.prior_mask[0].numpy(), a.refined_mask[0].numpy())
    np.testing.assert_array_equal(out.final_mask, (out.prior_mask + out.refined_mask) / 2)
    assert out.final_mask.min() >= 0 and out.final_mask.max() <= 1


def test_noise_only_in_training():
    torch.manual_seed(0)
    dec = HierarchicalMaskDecoder(32, 14, 224, depth=1, heads=2)
    pe = PromptEncoder(32, 224)
    img = torch.randn(1, 32, 14, 14)
    gt = torch.zeros(1, 224, 224)
    gt[0, 50:100, 50:100] = 1
    table = VarianceTable(np.array([0.1, 0.5]), np.array([1, 1]))
    prompts = pe.empty(1)
    with torch.no_grad():
        ev = dec(img, pe.dense_positional(14), prompts, gt, table, training=False)
        ev2 = dec(img, pe.dense_positional(14), prompts, gt, table, training=False)
        tr = dec(img, pe.dense_positional(14), prompts, gt, table, training=True, generator=torch.Generator())
    assert torch.equal(ev.refined_logits, ev2.refined_logits)
    assert torch.equal(ev.prior_logits, tr.prior_logits)
    assert not torch.equal(ev.refined_logits, tr.refined_logits)
