"""Frozen diffusion feature backbones with self-attention capture."""

from .base import (
    AttentionSite,
    AttentionState,
    FeatureBackbone,
    LayerCapture,
    StyleBank,
    TimestepStrategy,
    timestep_schedule,
)
from .tiny import TinyBackbone


def create_backbone(kind: str = "tiny", **kwargs) -> FeatureBackbone:
    """Build a backbone by config key (``tiny`` or ``sd15``)."""
    if kind == "tiny":
        return TinyBackbone(**kwargs)
    if kind in ("sd15", "diffusers"):
        from .sd import DiffusersBackbone

        return DiffusersBackbone.from_pretrained(**kwargs)
    raise ValueError(f"unknown backbone '{kind}'")


__all__ = [
    "AttentionSite",
    "AttentionState",
    "FeatureBackbone",
    "LayerCapture",
    "StyleBank",
    "TimestepStrategy",
    "TinyBackbone",
    "create_backbone",
    "timestep_schedule",
]
