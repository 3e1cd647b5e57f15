"""Synthetic scenes, camera rigs and style images for smoke tests and demos."""

from __future__ import annotations

import math

import numpy as np
import torch

from .cameras import CameraView, look_at, orbit_path
from .renderer import rgb_to_sh_dc
from .scene import GaussianScene, num_rest_coeffs


def toy_scene(
    n: int = 100, sh_degree: int = 1, seed: int = 0, radius: float = 1.0, scale: float = 0.18, dtype=torch.float32
) -> GaussianScene:
    """Gaussians spread over a ball around the origin with smooth colors."""
    g = torch.Generator().manual_seed(seed)
    dirs = torch.randn(n, 3, generator=g, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    r = radius * torch.rand(n, 1, generator=g, dtype=torch.float64) ** (1 / 3)
    positions = dirs * r
    base = 0.5 + 0.4 * torch.sin(3.0 * positions + torch.tensor([0.0, 2.0, 4.0], dtype=torch.float64))
    rot = torch.randn(n, 4, generator=g, dtype=torch.float64)
    rot = rot / rot.norm(dim=-1, keepdim=True)
    scales = torch.full((n, 3), math.log(scale), dtype=torch.float64)
    scales += 0.2 * torch.randn(n, 3, generator=g, dtype=torch.float64)
    opac = torch.full((n,), 2.0, dtype=torch.float64)
    rest = 0.05 * torch.randn(n, 3, num_rest_coeffs(sh_degree), generator=g, dtype=torch.float64)
    return GaussianScene(
        positions=positions.to(dtype),
        rotations=rot.to(dtype),
        scales=scales.to(dtype),
        opacities=opac.to(dtype),
        sh_dc=rgb_to_sh_dc(base).to(dtype),
        sh_rest=rest.to(dtype),
        sh_degree=sh_degree,
    )


def toy_cameras(n: int = 8, size: int = 32, distance: float = 3.5, elevation: float = 0.8, fov_deg: float = 45.0):
    """``n`` cameras on an orbit around the origin, all at ``size`` x ``size``."""
    return orbit_path((0.0, 0.0, 0.0), distance, elevation, n, size, size, fov_deg=fov_deg)


def single_camera(size: int = 32, distance: float = 5.0, f: float | None = None) -> CameraView:
    """Camera on the -z axis looking at the origin (identity rotation)."""
    f = f if f is not None else float(size)
    w2c = look_at((0.0, 0.0, -distance), (0.0, 0.0, 0.0))
    return CameraView(f, f, size / 2, size / 2, size, size, w2c, name="front")


def style_pattern(size: int = 32, kind: str = "stripes", seed: int = 0) -> torch.Tensor:
    """Procedural (size, size, 3) style image in [0, 1]."""
    v, u = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "stripes":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (u + v) / max(size / 4, 1))
        img = np.stack([t, 0.2 + 0.6 * (1 - t), 0.9 * t * t], axis=-1)
    elif kind == "checker":
        c = ((u // max(size // 8, 1)) + (v // max(size // 8, 1))) % 2
        img = np.stack([0.9 * c + 0.05, 0.3 + 0.0 * c, 0.9 * (1 - c) + 0.05], axis=-1)
    elif kind == "noise":
        img = np.random.default_rng(seed).random((size, size, 3))
    else:
        raise ValueError(f"unknown pattern '{kind}'")
    return torch.from_numpy(img.astype(np.float32))
