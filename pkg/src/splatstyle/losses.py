"""Attention-space style/content losses and the masked total objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import torch

from .geometry import resample_mask


class EmptyMaskError(ValueError):
    """Every view's geometry-aware mask is empty."""


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def style_loss(a_rendered: torch.Tensor, a_style: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over views, tokens and channels."""
    _check_shapes(a_rendered, a_style)
    return ((a_rendered - a_style) ** 2).mean()


def content_loss(a_rendered: torch.Tensor, a_content: torch.Tensor) -> torch.Tensor:
    """Same reduction as :func:`style_loss`, against the content branch."""
    _check_shapes(a_rendered, a_content)
    return ((a_rendered - a_content) ** 2).mean()


def token_errors(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per token: (N, T, d) x2 -> (N, T)."""
    _check_shapes(a, b)
    return ((a - b) ** 2).sum(dim=-1)


@dataclass
class LossReport:
    """Loss values of one step.

    ``total`` keeps the autograd graph; everything else is a float.
    Per-layer entries are the masked token means of each term alone, so
    ``total == sum_l (style_l + lam * content_l)``.
    """

    total: torch.Tensor
    style: float
    content: float
    lam: float
    fill_rate: float
    per_layer_style: Dict[str, float] = field(default_factory=dict)
    per_layer_content: Dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def as_row(self) -> Dict[str, float]:
        row = {
            "total": self.value,
            "style": self.style,
            "content": self.content,
            "lambda": self.lam,
            "mask_fill_rate": self.fill_rate,
        }
        for name, v in self.per_layer_style.items():
            row[f"style/{name}"] = v
        for name, v in self.per_layer_content.items():
            row[f"content/{name}"] = v
        return row


def masked_view_means(errors: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-view mean of (N, T) errors over tokens where ``mask`` (N, T) is set."""
    m = mask.to(errors.dtype)
    return (m * errors).sum(dim=1) / torch.clamp(m.sum(dim=1), min=1.0)


def total_loss(
    style_errors: Mapping[str, torch.Tensor],
    content_errors: Mapping[str, torch.Tensor],
    mask: torch.Tensor | None,
    lam: float,
    layer_sizes: Mapping[str, Tuple[int, int]],
    style_weight: float = 1.0,
) -> LossReport:
    """Masked objective summed over layers and averaged over views.

    Args:
        style_errors: layer -> (N, T) per-token squared distances to the
            style target.
        content_errors: layer -> (N, T) per-token squared distances to the
            content target.
        mask: (N, H, W) boolean geometry-aware mask at image resolution,
            resampled to each layer by nearest neighbour; ``None`` keeps all
            tokens.
        lam: content weight.
        layer_sizes: layer -> (h, w) token grid.
        style_weight: weight of the style term (1 in normal use).

    Views whose full-resolution mask is empty do not enter the average.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    first = next(iter(style_errors.values()))
    n = first.shape[0]
    if mask is None:
        active = torch.ones(n, dtype=torch.bool, device=first.device)
        fill = 1.0
    else:
        if mask.shape[0] != n:
            raise ValueError(f"mask has {mask.shape[0]} views, errors have {n}")
        active = mask.flatten(1).any(dim=1).to(first.device)
        fill = mask.float().mean().item()
    if not bool(active.any()):
        raise EmptyMaskError(
            "geometry-aware mask is empty for every view; use a larger or more diverse camera batch"
        )
    n_active = active.sum()

    total = first.new_zeros(())
    style_sum, content_sum = 0.0, 0.0
    per_style, per_content = {}, {}
    for name, s_err in style_errors.items():
        c_err = content_errors[name]
        h, w = layer_sizes[name]
        if mask is None:
            m = torch.ones(n, h * w, dtype=torch.bool, device=s_err.device)
        else:
            m = resample_mask(mask, h, w).reshape(n, h * w).to(s_err.device)
        combined = masked_view_means(style_weight * s_err + lam * c_err, m)
        total = total + (combined * active).sum() / n_active
        with torch.no_grad():
            s_val = float((masked_view_means(s_err, m) * active).sum() / n_active)
            c_val = float((masked_view_means(c_err, m) * active).sum() / n_active)
        per_style[name], per_content[name] = s_val, c_val
        style_sum += s_val
        content_sum += c_val
    return LossReport(
        total=total,
        style=style_sum,
        content=content_sum,
        lam=float(lam),
        fill_rate=fill,
        per_layer_style=per_style,
        per_layer_content=per_content,
    )
