"""Cross-view correspondence from fixed depth maps.

Grids use ``grid_sample``'s ``align_corners=True`` convention: (-1, -1) is
the center of the top-left pixel of the source view and (+1, +1) the center
of its bottom-right pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import CameraView

INVALID_COORD = -2.0
ALPHA_THRESHOLD = 0.5


def pixel_centers(height: int, width: int, dtype=torch.float64) -> torch.Tensor:
    """Homogeneous pixel centers, shape (H, W, 3)."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype) + 0.5, torch.arange(width, dtype=dtype) + 0.5, indexing="ij"
    )
    return torch.stack([u, v, torch.ones_like(u)], dim=-1)


def normalize_pixels(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Map continuous pixel coordinates (centers at i + 0.5) to [-1, 1]."""
    sx = 2.0 / max(width - 1, 1)
    sy = 2.0 / max(height - 1, 1)
    return torch.stack([(uv[..., 0] - 0.5) * sx - 1.0, (uv[..., 1] - 0.5) * sy - 1.0], dim=-1)


def identity_grid(height: int, width: int, dtype=torch.float64) -> torch.Tensor:
    return normalize_pixels(pixel_centers(height, width, dtype)[..., :2], width, height)


def compute_grid(cam_b: CameraView, cam_j: CameraView, depth_b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sampling grid from view ``b`` into view ``j`` plus the depth in ``j``.

    Every pixel of ``b`` is back-projected with its depth, moved to world
    space, re-projected into ``j`` and normalized to [-1, 1].

    Args:
        cam_b: reference camera; its size must match ``depth_b``.
        cam_j: source camera.
        depth_b: (H, W) depth of view ``b``; pixels with depth <= 0 are
            invalid and get raw depth 0.

    Returns:
        grid: (H, W, 2) normalized coordinates in view ``j`` (x first).
        raw_depth_j: (H, W) camera-space z of each point in view ``j``.
    """
    out_dtype = depth_b.dtype if depth_b.is_floating_point() else torch.float64
    # cameras live on the CPU; grids are small enough to build there
    depth = depth_b.detach().to("cpu", torch.float64)
    height, width = depth.shape
    if (cam_b.height, cam_b.width) != (height, width):
        raise ValueError("depth map does not match the reference camera size")
    k_b = cam_b.intrinsics
    if abs(torch.linalg.det(k_b).item()) < 1e-12 or abs(torch.linalg.det(cam_j.intrinsics).item()) < 1e-12:
        raise ValueError("camera intrinsics are not invertible")

    rays = pixel_centers(height, width) @ torch.linalg.inv(k_b).T
    pts_b = rays * depth[..., None]
    rel = cam_j.world_to_camera @ cam_b.camera_to_world
    pts_j = pts_b @ rel[:3, :3].T + rel[:3, 3]
    z = pts_j[..., 2]
    proj = pts_j @ cam_j.intrinsics.T
    safe_z = torch.where(z.abs() > 1e-12, proj[..., 2], torch.full_like(z, 1e-12))
    uv = proj[..., :2] / safe_z[..., None]
    grid = normalize_pixels(uv, cam_j.width, cam_j.height)

    invalid = depth <= 0
    grid = torch.where(invalid[..., None], torch.full_like(grid, INVALID_COORD), grid)
    raw = torch.where(invalid, torch.zeros_like(z), z)
    return grid.to(depth_b.device, out_dtype), raw.to(depth_b.device, out_dtype)


def compute_visibility(grid: torch.Tensor, raw_depth_j: torch.Tensor) -> torch.Tensor:
    """Boolean (H, W): in front of camera ``j`` and inside its image domain."""
    if grid.shape[:-1] != raw_depth_j.shape:
        raise ValueError("grid and depth shapes differ")
    in_domain = (grid[..., 0] >= -1) & (grid[..., 0] <= 1) & (grid[..., 1] >= -1) & (grid[..., 1] <= 1)
    return (raw_depth_j > 0) & in_domain


def warp_features(features_j: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``features_j`` (h, w, C) at ``grid`` (h', w', 2).

    Out-of-domain samples are zero-padded.
    """
    feat = features_j.permute(2, 0, 1)[None]
    g = grid.to(features_j.dtype)[None]
    out = F.grid_sample(feat, g, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out[0].permute(1, 2, 0)


def warp_tokens(tokens_j: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Warp a (..., h*w, C) token sequence laid out row-major on ``grid``'s h x w."""
    h, w = grid.shape[:2]
    lead = tokens_j.shape[:-2]
    c = tokens_j.shape[-1]
    feat = tokens_j.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    g = grid.to(tokens_j.dtype)[None].expand(feat.shape[0], -1, -1, -1)
    out = F.grid_sample(feat, g, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.permute(0, 2, 3, 1).reshape(*lead, h * w, c)


def geometry_aware_mask(
    visibilities: Mapping[Tuple[int, int], torch.Tensor], n_views: int, shape: Tuple[int, int] | None = None
) -> torch.Tensor:
    """Per-view mask of pixels not observed by any earlier view of the batch.

    Args:
        visibilities: ``{(b, j): v_b<-j}`` for at least every ``j < b``.
        n_views: batch size N.
        shape: (H, W); only needed when ``visibilities`` is empty.

    Returns:
        Boolean (N, H, W).
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    if shape is None:
        if not visibilities:
            raise ValueError("cannot infer the image size without any visibility map")
        shape = tuple(next(iter(visibilities.values())).shape)
    masks = []
    for b in range(n_views):
        keep = torch.ones(shape, dtype=torch.bool)
        for j in range(b):
            try:
                keep &= ~visibilities[(b, j)].bool()
            except KeyError:
                raise KeyError(f"missing visibility for view pair ({b}, {j})") from None
        masks.append(keep)
    return torch.stack(masks)


def resample_grid(grid: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resampling of a coordinate grid to (height, width)."""
    if grid.shape[:2] == (height, width):
        return grid
    g = grid.permute(2, 0, 1)[None]
    return F.interpolate(g, size=(height, width), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)


def resample_mask(mask: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Nearest-neighbour resampling of a (..., H, W) binary mask."""
    if mask.shape[-2:] == (height, width):
        return mask
    lead = mask.shape[:-2]
    m = mask.reshape(-1, 1, *mask.shape[-2:]).to(torch.float32)
    out = F.interpolate(m, size=(height, width), mode="nearest")
    return out.reshape(*lead, height, width) > 0.5


def resample_guidance(guidance: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Resample a grid (float, last dim 2) or a mask (bool) to a new size."""
    if guidance.dtype == torch.bool:
        return resample_mask(guidance, height, width)
    if guidance.shape[-1] == 2 and guidance.dim() == 3:
        return resample_grid(guidance, height, width)
    raise ValueError("guidance must be an (H, W, 2) grid or a boolean mask")


@dataclass
class GeometryGuidance:
    """Grids, visibilities and the geometry-aware mask for one camera batch.

    ``grids[(b, j)]`` samples view ``j`` for the pixels of view ``b``.
    """

    grids: Dict[Tuple[int, int], torch.Tensor]
    visibility: Dict[Tuple[int, int], torch.Tensor]
    mask: torch.Tensor  # (N, H, W) bool
    _cache: Dict[Tuple[int, int], "GeometryGuidance"] = field(default_factory=dict, repr=False)

    @property
    def n_views(self) -> int:
        return self.mask.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.mask.shape[1:])

    def at_resolution(self, height: int, width: int) -> "GeometryGuidance":
        """Guidance for an attention layer of the given token grid size.

        Visibility is resampled by nearest neighbour and additionally
        required to have an in-domain resampled coordinate.
        """
        if (height, width) == self.size:
            return self
        if (height, width) not in self._cache:
            grids = {k: resample_grid(g, height, width) for k, g in self.grids.items()}
            vis = {}
            for k, v in self.visibility.items():
                g = grids[k]
                in_domain = (g.abs() <= 1).all(dim=-1)
                vis[k] = resample_mask(v, height, width) & in_domain
            self._cache[(height, width)] = GeometryGuidance(
                grids=grids, visibility=vis, mask=resample_mask(self.mask, height, width)
            )
        return self._cache[(height, width)]

    def fill_rate(self) -> float:
        return self.mask.float().mean().item()

    def to_numpy(self) -> Dict[str, np.ndarray]:
        out = {"mask": self.mask.cpu().numpy()}
        for (b, j), g in self.grids.items():
            out[f"grid_{b}_{j}"] = g.cpu().numpy()
            out[f"visibility_{b}_{j}"] = self.visibility[(b, j)].cpu().numpy()
        return out


def build_guidance(
    cameras: Sequence[CameraView],
    depths: Sequence[torch.Tensor],
    alphas: Sequence[torch.Tensor] | None = None,
    alpha_threshold: float = ALPHA_THRESHOLD,
) -> GeometryGuidance:
    """Grids and visibilities for every ordered pair b != j, plus the mask.

    Pixels of view ``b`` whose alpha is below ``alpha_threshold`` are
    treated as background: invisible in every ``v_b<-j``.
    """
    n = len(cameras)
    depths = [d.detach() for d in depths]
    if alphas is not None:
        depths = [torch.where(a.detach() >= alpha_threshold, d, torch.zeros_like(d)) for d, a in zip(depths, alphas)]
    grids, vis = {}, {}
    for b in range(n):
        for j in range(n):
            if j == b:
                continue
            grid, raw = compute_grid(cameras[b], cameras[j], depths[b])
            grids[(b, j)] = grid
            vis[(b, j)] = compute_visibility(grid, raw)
    mask = geometry_aware_mask(vis, n, shape=tuple(depths[0].shape))
    return GeometryGuidance(grids=grids, visibility=vis, mask=mask)
