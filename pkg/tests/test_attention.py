import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatstyle.attention import (
    FullyMaskedRowError,
    attention,
    augment_kv,
    center_normalize,
    geometry_guided_attention,
    style_signal,
)
from splatstyle.geometry import GeometryGuidance, geometry_aware_mask, identity_grid
from oracles import attention_loop, center_normalize_loop, gga_oracle


def guidance_from(grids, vis, n, h, w):
    mask = geometry_aware_mask(vis, n, shape=(h, w))
    return GeometryGuidance(grids=grids, visibility=vis, mask=mask)


def random_guidance(n, h, w, gen, p_visible=0.6):
    grids, vis = {}, {}
    for b in range(n):
        for j in range(n):
            if b != j:
                grids[(b, j)] = torch.rand(h, w, 2, generator=gen, dtype=torch.float64) * 2.4 - 1.2
                vis[(b, j)] = torch.rand(h, w, generator=gen) < p_visible
    return guidance_from(grids, vis, n, h, w)


def test_single_token_returns_value():
    q, k = torch.randn(1, 1, 4), torch.randn(1, 1, 4)
    v = torch.randn(1, 1, 4)
    assert torch.allclose(attention(q, k, v), v)


def test_uniform_logits_average_values():
    v = torch.randn(1, 5, 6, dtype=torch.float64)
    out = attention(torch.zeros(1, 3, 6, dtype=torch.float64), torch.randn(1, 5, 6, dtype=torch.float64), v, heads=2)
    assert torch.allclose(out, v.mean(dim=1, keepdim=True).expand(1, 3, 6))


def test_scalar_softmax_example():
    q = torch.tensor([[[1.0]]], dtype=torch.float64)
    k = torch.tensor([[[1.0], [0.0]]], dtype=torch.float64)
    v = torch.tensor([[[2.0], [4.0]]], dtype=torch.float64)
    assert float(attention(q, k, v)) == pytest.approx(2 * 0.7310585786 + 4 * 0.2689414214, abs=1e-8)
    assert float(attention(q, k, v)) == pytest.approx(2.5379, abs=1e-4)


def test_multihead_matches_loop():
    gen = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 5, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    out = attention(q, k, v, heads=4)
    for b in range(2):
        for i in range(5):
            ref = attention_loop(q[b, i].numpy(), list(k[b].numpy()), list(v[b].numpy()), 4)
            assert np.allclose(out[b, i].numpy(), ref, atol=1e-10)


def test_fully_masked_row_raises():
    q = torch.randn(1, 2, 4)
    bias = torch.tensor([[[0.0, 0.0], [-math.inf, -math.inf]]])
    with pytest.raises(FullyMaskedRowError):
        attention(q, q, q, bias)


def test_rows_are_stochastic_under_bias():
    gen = torch.Generator().manual_seed(1)
    q, k = torch.randn(1, 4, 6, generator=gen), torch.randn(1, 7, 6, generator=gen)
    bias = torch.where(torch.rand(1, 1, 7, generator=gen) < 0.5, -math.inf, 0.0)
    bias[..., 0] = 0.0
    # one-hot values make the outputs equal to the attention weights
    q7 = torch.cat([q, q.new_zeros(1, 4, 1)], -1)
    k7 = torch.cat([k, k.new_zeros(1, 7, 1)], -1)
    weights = attention(q7, k7, torch.eye(7)[None], bias)
    assert torch.allclose(weights.sum(-1), torch.ones(1, 4), atol=1e-5)
    assert torch.all(weights[..., torch.isneginf(bias[0, 0])] == 0)


def test_center_normalize_examples():
    out = center_normalize(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([-1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)], dtype=torch.float64),
                          atol=1e-7)
    assert torch.equal(center_normalize(torch.full((4,), 3.0)), torch.zeros(4))
    unit = center_normalize(torch.tensor([0.3, -0.7, 0.1, 0.3], dtype=torch.float64))
    assert torch.allclose(center_normalize(unit), unit, atol=1e-6)


def test_center_normalize_matches_loop():
    a = torch.randn(3, 5, 7, dtype=torch.float64)
    assert np.allclose(center_normalize(a).numpy(), center_normalize_loop(a.numpy()), atol=1e-12)


def test_center_normalize_zero_gradient_is_finite():
    a = torch.full((2, 4), 1.5, requires_grad=True)
    center_normalize(a).sum().backward()
    assert torch.isfinite(a.grad).all()


finite = st.floats(-100, 100, allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), st.floats(0.01, 100), st.floats(-50, 50))
def test_center_normalize_invariants(a, scale, shift):
    a = torch.from_numpy(a)
    out = center_normalize(a)
    assert out.mean(dim=-1).abs().max() <= 1e-6
    centered_norm = (a - a.mean(-1, keepdim=True)).norm(dim=-1)
    norms = out.norm(dim=-1)
    for n, c in zip(norms, centered_norm):
        if c > 1e-3:
            assert abs(float(n) - 1) <= 1e-5
        else:
            assert float(n) <= 1 + 1e-5
    keep = centered_norm > 1e-3  # epsilon-dominated tokens are degenerate
    assert torch.allclose(center_normalize(out)[keep], out[keep], atol=1e-5)
    # the scaled token must stay out of the epsilon regime too (error ~ eps / norm)
    keep_scaled = keep & (scale * centered_norm > 1e-2)
    assert torch.allclose(center_normalize(scale * a + shift)[keep_scaled], out[keep_scaled], atol=1e-5)


def test_style_signal_self_injection_identity():
    gen = torch.Generator().manual_seed(2)
    q, k, v = (torch.randn(2, 6, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    a_n = center_normalize(attention(q, k, v, heads=2))
    for b in range(2):
        s = style_signal(q[b:b + 1], k[b:b + 1], v[b:b + 1], heads=2)
        assert torch.equal(s, a_n[b:b + 1])


def test_style_signal_single_token_and_composition():
    gen = torch.Generator().manual_seed(3)
    q = torch.randn(2, 5, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    ks, vs = torch.randn(1, 1, 4, generator=gen, dtype=torch.float64), torch.randn(1, 1, 4, generator=gen,
                                                                                   dtype=torch.float64)
    out = style_signal(q, ks, vs, heads=2)
    assert torch.allclose(out, center_normalize(vs.expand(2, 5, 4)))
    assert not out.requires_grad
    ks, vs = torch.randn(1, 3, 4, generator=gen, dtype=torch.float64), torch.randn(1, 3, 4, generator=gen,
                                                                                   dtype=torch.float64)
    ref = np.zeros((2, 5, 4))
    for b in range(2):
        for i in range(5):
            ref[b, i] = attention_loop(q[b, i].detach().numpy(), list(ks[0].numpy()), list(vs[0].numpy()), 2)
    assert np.allclose(style_signal(q, ks, vs, heads=2).numpy(), center_normalize_loop(ref), atol=1e-10)
    raw = style_signal(q, ks, vs, heads=2, normalize=False)
    assert np.allclose(raw.numpy(), ref, atol=1e-10)


def test_augment_kv_layout():
    gen = torch.Generator().manual_seed(4)
    n, h, w, d = 3, 2, 3, 4
    k, v = torch.randn(n, h * w, d, generator=gen), torch.randn(n, h * w, d, generator=gen)
    g = random_guidance(n, h, w, gen)
    aug = augment_kv(k, v, g)
    assert aug.keys.shape == (n, n * h * w, d) and aug.bias.shape == (n, 1, n * h * w)
    assert aug.tokens_per_view == h * w
    assert torch.all(aug.bias[:, :, : h * w] == 0)
    for b in range(n):
        others = [j for j in range(n) if j != b]
        for slot, j in enumerate(others, start=1):
            block = aug.bias[b, 0, slot * h * w:(slot + 1) * h * w]
            vis = g.visibility[(b, j)].reshape(-1)
            assert torch.equal(torch.isneginf(block), ~vis)
            assert torch.all(block[vis] == 0)


def test_augment_kv_identity_grids_copy_tokens():
    k, v = torch.randn(2, 6, 4), torch.randn(2, 6, 4)
    grids = {(0, 1): identity_grid(2, 3), (1, 0): identity_grid(2, 3)}
    vis = {key: torch.ones(2, 3, dtype=torch.bool) for key in grids}
    aug = augment_kv(k, v, guidance_from(grids, vis, 2, 2, 3))
    assert torch.allclose(aug.keys[0, 6:], k[1], atol=1e-6)
    assert torch.allclose(aug.values[1, 6:], v[0], atol=1e-6)
    assert torch.all(aug.bias == 0)


def test_augment_kv_resolution_mismatch():
    k = torch.randn(2, 6, 4)
    g = random_guidance(2, 3, 3, torch.Generator().manual_seed(0))
    with pytest.raises(ValueError):
        augment_kv(k, k, g)


def test_gga_single_view_is_plain_bitwise():
    q, k, v = torch.randn(1, 16, 8), torch.randn(1, 16, 8), torch.randn(1, 16, 8)
    g = guidance_from({}, {}, 1, 4, 4)
    assert torch.equal(geometry_guided_attention(q, k, v, g, heads=2), attention(q, k, v, heads=2))


def test_gga_all_invisible_equals_plain():
    gen = torch.Generator().manual_seed(5)
    q, k, v = (torch.randn(3, 16, 8, generator=gen) for _ in range(3))
    g = random_guidance(3, 4, 4, gen, p_visible=0.0)
    out = geometry_guided_attention(q, k, v, g, heads=2)
    assert torch.allclose(out, attention(q, k, v, heads=2), atol=1e-6)


def test_gga_matches_masked_softmax_oracle():
    gen = torch.Generator().manual_seed(6)
    n, h, w, d = 2, 4, 4, 8
    q, k, v = (torch.randn(n, h * w, d, generator=gen, dtype=torch.float64) for _ in range(3))
    g = random_guidance(n, h, w, gen)
    out = geometry_guided_attention(q, k, v, g, heads=2)
    ref = gga_oracle(q.numpy(), k.numpy(), v.numpy(), g.grids, g.visibility, h, w, heads=2)
    assert np.allclose(out.numpy(), ref, atol=1e-10)


def test_gga_gradients_flow_to_queries_and_keys():
    gen = torch.Generator().manual_seed(7)
    q, k, v = (torch.randn(2, 16, 8, generator=gen, dtype=torch.float64, requires_grad=True) for _ in range(3))
    g = random_guidance(2, 4, 4, gen)
    geometry_guided_attention(q, k, v, g, heads=2).pow(2).sum().backward()
    assert all(t.grad is not None and torch.isfinite(t.grad).all() for t in (q, k, v))
