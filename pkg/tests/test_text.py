import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pgsam.data import ExpertReport
from pgsam.exceptions import ConfigurationError, ProviderError, ValidationError
from pgsam.text import (
    CoarseMaskDecoder,
    HashTextProvider,
    PromptSet,
    SpatialPriorMask,
    TextAdapter,
    TransformersTextProvider,
    apply_prior,
    build_spatial_prior,
    embed_text,
    extract_prompts,
    make_provider,
    upsample_factors,
)


def test_hash_provider_deterministic_and_frozen():
    p = HashTextProvider()
    text = ExpertReport("left", "deep", (10, 12, 11)).rendered_text
    a, b = embed_text(text, p), embed_text(text, HashTextProvider())
    assert a.tobytes() == b.tobytes()
    assert a.shape == (256,) and np.isfinite(a).all()


def test_hash_provider_left_right_differ():
    p = HashTextProvider()
    left = ExpertReport("left", "anterior", (20, 20, 20)).rendered_text
    right = ExpertReport("right", "anterior", (20, 20, 20)).rendered_text
    e_l, e_r = p.embed(left), p.embed(right)
    # Only the laterality token differs, so the difference is the scaled token delta.
    n = len(p.tokenize(left))
    expected = (p.token_vector("left") - p.token_vector("right")) / np.sqrt(n)
    np.testing.assert_allclose(e_l - e_r, expected, atol=1e-5)
    assert np.any(e_l != e_r)


def test_empty_text_rejected():
    with pytest.raises(ValidationError):
        HashTextProvider().embed("")
    with pytest.raises(ValidationError):
        HashTextProvider().embed("   ")


def test_unavailable_provider_raises(tmp_path):
    provider = TransformersTextProvider(str(tmp_path / "no-such-model"))
    with pytest.raises(ProviderError):
        provider.embed("left parotid lesion")
    with pytest.raises(ConfigurationError):
        make_provider("bogus")


def test_adapter_starts_at_identity_and_bottleneck_shape():
    adapter = TextAdapter(256, 32)
    e = torch.randn(3, 256)
    assert torch.equal(adapter(e), e)
    assert adapter.bottleneck(e).shape == (3, 32)
    with pytest.raises(ConfigurationError):
        TextAdapter(16, 16)


def test_adapter_gradients(fd_error):
    torch.manual_seed(0)
    adapter = TextAdapter(12, 4).double()
    with torch.no_grad():
        adapter.up.weight.normal_()
    e = torch.randn(2, 12, dtype=torch.float64)
    params = list(adapter.parameters())
    assert fd_error(lambda: adapter(e).tanh().sum(), params) < 1e-4


def test_adapter_only_trains_adapter():
    provider = HashTextProvider(32)
    before = provider.embed("left posterior").copy()
    adapter = TextAdapter(32, 8)
    opt = torch.optim.SGD(adapter.parameters(), lr=0.1)
    e = torch.as_tensor(provider.embed("left posterior"))
    for _ in range(3):
        opt.zero_grad()
        adapter(e).pow(2).sum().backward()
        opt.step()
    assert provider.embed("left posterior").tobytes() == before.tobytes()


def test_spatial_prior_single_and_disjoint():
    a = np.zeros((6, 6), np.uint8)
    a[1:3, 1:3] = 1
    b = np.zeros((6, 6), np.uint8)
    b[4:6, 3:6] = 1
    np.testing.assert_array_equal(build_spatial_prior([a]).weights, a)
    prior = build_spatial_prior([a, b])
    # Direct counting: each covered pixel has frequency 1/2, the max, so it normalises to 1.
    counts = np.zeros((6, 6))
    for m in (a, b):
        counts += m
    expected = (counts / 2) / (counts / 2).max()
    np.testing.assert_array_equal(prior.weights, expected)
    assert prior.support_count == 2


def test_spatial_prior_fallback_and_mismatch():
    prior = build_spatial_prior([], image_size=8)
    assert prior.fallback and np.all(prior.weights == 1.0)
    with pytest.raises(ValidationError):
        build_spatial_prior([np.zeros((4, 4)), np.zeros((5, 5))])


def test_spatial_prior_roundtrip(tmp_path):
    prior = build_spatial_prior([np.eye(5, dtype=np.uint8)])
    prior.save(tmp_path / "prior.bin")
    loaded = SpatialPriorMask.load(tmp_path / "prior.bin")
    np.testing.assert_array_equal(loaded.weights, prior.weights)
    assert loaded.support_count == 1


def test_upsample_factor_table():
    assert upsample_factors(14, 224) == [2, 2, 2, 2]
    assert upsample_factors(16, 224) == [2, 7]
    for g in (14, 16):
        dec = CoarseMaskDecoder(16, 8, g, 224)
        size = g
        for f in dec.factors:
            size = (size - 1) * f + f
        assert size == 224
        out = dec(torch.randn(2, 16, g, g), torch.randn(2, 8))
        assert out.shape == (2, 224, 224)
        probs = torch.sigmoid(out)
        assert probs.min() >= 0 and probs.max() <= 1


def test_zero_text_equals_no_text():
    dec = CoarseMaskDecoder(16, 8, 14)
    x = torch.randn(1, 16, 14, 14)
    assert torch.equal(dec(x, torch.zeros(1, 8)), dec(x, None))


def test_apply_prior_examples():
    coarse = np.full((4, 4), 0.8)
    np.testing.assert_array_equal(apply_prior(coarse, np.ones((4, 4))), coarse)
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 0.5
    out = apply_prior(coarse, m)
    assert out[1, 1] == pytest.approx(0.4)
    assert out[0].sum() == 0 and out.sum() == pytest.approx(4 * 0.4)


def test_extract_single_pixel():
    probs = np.zeros((32, 32))
    probs[10, 20] = 1
    p = extract_prompts(probs)
    assert p.point == (10.0, 20.0) and p.bbox == (10.0, 20.0, 10.0, 20.0) and not p.fallback_used


def test_extract_rectangle_against_enumeration():
    probs = np.zeros((16, 16))
    probs[4:10, 6:12] = 0.9
    p = extract_prompts(probs)
    coords = [(r, c) for r in range(16) for c in range(16) if probs[r, c] >= 0.5]
    assert p.point == (sum(r for r, _ in coords) / len(coords), sum(c for _, c in coords) / len(coords))
    assert p.point == (6.5, 8.5)
    assert p.bbox == (4, 6, 9, 11)


def test_extract_fallback_uses_prior():
    prior = np.zeros((8, 8))
    prior[2:4, 5:7] = 1.0
    p = extract_prompts(np.full((8, 8), 0.2), 0.5, prior)
    assert p.fallback_used
    assert p.point == (2.5, 5.5) and p.bbox == (2, 5, 3, 6)
    p2 = extract_prompts(np.zeros((8, 8)))
    assert p2.fallback_used and p2.bbox == (0, 0, 7, 7)


def test_promptset_rejects_unordered_box():
    with pytest.raises(ValidationError):
        PromptSet((1, 1), (3, 0, 2, 4))


@st.composite
def supports(draw):
    h, w = draw(st.integers(4, 20)), draw(st.integers(4, 20))
    cells = draw(st.lists(st.tuples(st.integers(0, h - 1), st.integers(0, w - 1)), min_size=1, max_size=30))
    arr = np.zeros((h, w))
    for r, c in cells:
        arr[r, c] = 1.0
    return arr


@given(supports(), st.integers(0, 6), st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_point_in_bbox_and_translation(arr, dx, dy):
    p = extract_prompts(arr)
    x0, y0, x1, y1 = p.bbox
    assert x0 <= p.point[0] <= x1 and y0 <= p.point[1] <= y1
    shifted = np.zeros((arr.shape[0] + dx, arr.shape[1] + dy))
    shifted[dx:, dy:] = arr
    q = extract_prompts(shifted)
    assert q.point == pytest.approx((p.point[0] + dx, p.point[1] + dy), abs=1e-12)
    assert q.bbox == (x0 + dx, y0 + dy, x1 + dx, y1 + dy)


@given(st.integers(0, 2**16))
@settings(max_examples=40)
def test_raising_prior_never_shrinks_support(seed):
    r = np.random.default_rng(seed)
    coarse = r.random((8, 8))
    m = r.random((8, 8))
    raised = np.minimum(m + r.random((8, 8)) * (r.random((8, 8)) > 0.5), 1.0)
    before = apply_prior(coarse, m) >= 0.5
    after = apply_prior(coarse, raised) >= 0.5
    assert np.all(after[before])
