"""Attention math: scaled dot-product attention, KV injection, geometry-guided
key/value augmentation and the center/normalize operator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import GeometryGuidance, warp_tokens

NORM_EPS = 1e-8


class FullyMaskedRowError(RuntimeError):
    """A query row had every key masked out."""


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, t, d = x.shape
    if d % heads:
        raise ValueError(f"channel dim {d} is not divisible by {heads} heads")
    return x.reshape(*lead, t, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, t, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, t, h * dh)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: torch.Tensor | None = None,
    heads: int = 1,
) -> torch.Tensor:
    """Softmax(Q K^T / sqrt(d_head) + bias) V, computed per head.

    Args:
        q: (..., Tq, d) queries at full channel width.
        k: (..., Tk, d) keys.
        v: (..., Tk, d) values.
        bias: additive logits bias broadcastable to (..., Tq, Tk); use
            ``-inf`` to mask a key.
        heads: number of heads the channel dimension is split into.

    Returns:
        (..., Tq, d) concatenated head outputs.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key widths differ")
    if bias is not None:
        if torch.isneginf(bias).all(dim=-1).any():
            raise FullyMaskedRowError("attention bias masks every key of some query")
        bias = bias.to(q.dtype).unsqueeze(-3)  # broadcast over heads
    out = F.scaled_dot_product_attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), attn_mask=bias
    )
    return _merge_heads(out)


def center_normalize(a: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Subtract the channel mean of every token and scale it to unit L2 norm.

    Constant tokens map to the zero vector.
    """
    centered = a - a.mean(dim=-1, keepdim=True)
    # rounding in the mean would otherwise leave tiny residues on constant tokens
    constant = (a == a[..., :1]).all(dim=-1, keepdim=True)
    centered = torch.where(constant, torch.zeros_like(centered), centered)
    return centered / (torch.linalg.vector_norm(centered, dim=-1, keepdim=True) + eps)


def style_signal(
    q: torch.Tensor,
    style_k: torch.Tensor,
    style_v: torch.Tensor,
    heads: int = 1,
    normalize: bool = True,
) -> torch.Tensor:
    """Attention of the given queries over the style image's keys and values.

    The result is a constant target: it is computed without autograd.
    """
    with torch.no_grad():
        k = style_k.expand(*q.shape[:-2], *style_k.shape[-2:])
        v = style_v.expand(*q.shape[:-2], *style_v.shape[-2:])
        out = attention(q.detach(), k, v, heads=heads)
        return center_normalize(out) if normalize else out


@dataclass
class AugmentedKV:
    """Keys/values of every view extended with warped tokens of the others.

    ``bias`` has shape (N, 1, N*T): it is the same for every query of a view
    because masking depends only on the warped key position.
    """

    keys: torch.Tensor  # (N, N*T, d)
    values: torch.Tensor  # (N, N*T, d)
    bias: torch.Tensor  # (N, 1, N*T)

    @property
    def tokens_per_view(self) -> int:
        return self.keys.shape[1] // self.keys.shape[0]


def augment_kv(
    keys: torch.Tensor,
    values: torch.Tensor,
    guidance: GeometryGuidance,
) -> AugmentedKV:
    """Append bilinearly warped K/V of every other view, ascending by index.

    Args:
        keys, values: (N, T, d) with T = h*w tokens in row-major order.
        guidance: geometry guidance already at the layer's h x w.
    """
    n, t, _ = keys.shape
    if guidance.n_views != n:
        raise ValueError(f"guidance covers {guidance.n_views} views, features have {n}")
    h, w = guidance.size
    if h * w != t:
        raise ValueError(f"guidance resolution {h}x{w} does not match {t} tokens")

    k_out, v_out, b_out = [], [], []
    for b in range(n):
        ks, vs = [keys[b]], [values[b]]
        bias = [torch.zeros(t, dtype=keys.dtype, device=keys.device)]
        for j in range(n):
            if j == b:
                continue
            grid = guidance.grids[(b, j)]
            ks.append(warp_tokens(keys[j], grid))
            vs.append(warp_tokens(values[j], grid))
            vis = guidance.visibility[(b, j)].reshape(t).to(keys.device)
            bias.append(torch.where(vis, 0.0, float("-inf")).to(keys.dtype))
        k_out.append(torch.cat(ks))
        v_out.append(torch.cat(vs))
        b_out.append(torch.cat(bias)[None])
    return AugmentedKV(torch.stack(k_out), torch.stack(v_out), torch.stack(b_out))


def geometry_guided_attention(
    q: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    guidance: GeometryGuidance | None,
    heads: int = 1,
) -> torch.Tensor:
    """Self-attention whose keys/values include visible warped cross-view tokens.

    With a single view (or no guidance) this is plain self-attention.
    """
    if guidance is None or q.shape[0] == 1:
        return attention(q, keys, values, heads=heads)
    aug = augment_kv(keys, values, guidance)
    return attention(q, aug.keys, aug.values, aug.bias, heads=heads)
