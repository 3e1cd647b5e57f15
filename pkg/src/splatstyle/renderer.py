"""Differentiable Gaussian splatting in plain PyTorch.

Gaussians are projected with the EWA approximation, sorted front to back by
camera-space depth and alpha-composited per pixel. Each splat is truncated
at three standard deviations. The implementation is
dense within screen tiles, which keeps it simple and exact enough to serve
as the reference for gradient checks; large scenes should be rendered on an
accelerator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn.functional as F

from .cameras import CameraView
from .scene import GaussianScene

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
TRUNCATION = 3.0  # splat support in standard deviations


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W), 0 where nothing was hit
    alpha: torch.Tensor  # (H, W)


def eval_sh(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate real spherical harmonics.

    Args:
        degree: SH degree in [0, 3].
        sh: (M, 3, (degree+1)^2) coefficients, channel-major.
        dirs: (M, 3) unit viewing directions.

    Returns:
        (M, 3) color values before the +0.5 offset.
    """
    result = SH_C0 * sh[..., 0]
    if degree < 1:
        return result
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    result = result - SH_C1 * y * sh[..., 1] + SH_C1 * z * sh[..., 2] - SH_C1 * x * sh[..., 3]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (
        result
        + SH_C2[0] * xy * sh[..., 4]
        + SH_C2[1] * yz * sh[..., 5]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6]
        + SH_C2[3] * xz * sh[..., 7]
        + SH_C2[4] * (xx - yy) * sh[..., 8]
    )
    if degree < 3:
        return result
    return (
        result
        + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9]
        + SH_C3[1] * xy * z * sh[..., 10]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15]
    )


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    return (rgb - 0.5) / SH_C0


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    q = F.normalize(q, dim=-1)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


class SplatRenderer:
    """Reference rasterizer.

    Args:
        background: RGB background color.
        near: Gaussians with camera depth at or below this are culled.
        tile_size: screen tile edge in pixels; Gaussians are culled per tile
            by their 3-sigma footprint.
        blur: isotropic screen-space variance added to every splat.
    """

    def __init__(self, background=(0.0, 0.0, 0.0), near: float = 0.01, tile_size: int = 64, blur: float = 0.3):
        self.background = tuple(float(c) for c in background)
        self.near = near
        self.tile_size = tile_size
        self.blur = blur

    def __call__(self, scene: GaussianScene, camera: CameraView) -> RenderOutput:
        return self.render(scene, camera)

    def project(self, scene: GaussianScene, camera: CameraView):
        dtype = scene.positions.dtype
        w2c = camera.world_to_camera.to(scene.positions.device, dtype)
        rot, trans = w2c[:3, :3], w2c[:3, 3]
        p_cam = scene.positions @ rot.T + trans
        x, y, z = p_cam.unbind(-1)
        valid = z > self.near
        zs = torch.where(valid, z, torch.ones_like(z))

        lim_x = 1.3 * 0.5 * camera.width / camera.fx
        lim_y = 1.3 * 0.5 * camera.height / camera.fy
        tx = (x / zs).clamp(-lim_x, lim_x) * zs
        ty = (y / zs).clamp(-lim_y, lim_y) * zs
        zero = torch.zeros_like(zs)
        jac = torch.stack(
            [
                camera.fx / zs, zero, -camera.fx * tx / zs**2,
                zero, camera.fy / zs, -camera.fy * ty / zs**2,
            ],
            dim=-1,
        ).reshape(-1, 2, 3)

        r = quaternion_to_rotation(scene.rotations)
        s = torch.exp(scene.scales)
        m = r * s[:, None, :]
        cov3d = m @ m.transpose(1, 2)
        t = jac @ rot
        cov2d = t @ cov3d @ t.transpose(1, 2)
        cov2d = cov2d + self.blur * torch.eye(2, dtype=dtype)

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        conic = torch.stack([c / det, -b / det, a / det], dim=-1)
        mean2d = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], dim=-1)
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.1))
        radius = TRUNCATION * torch.sqrt(lam)
        return mean2d, conic, z, radius, valid & (det > 0)

    def colors(self, scene: GaussianScene, camera: CameraView) -> torch.Tensor:
        dtype = scene.positions.dtype
        center = camera.center.to(scene.positions.device, dtype)
        dirs = F.normalize(scene.positions - center, dim=-1)
        sh = torch.cat([scene.sh_dc[..., None], scene.sh_rest], dim=-1)
        return torch.clamp(eval_sh(scene.sh_degree, sh, dirs) + 0.5, min=0.0)

    def render(self, scene: GaussianScene, camera: CameraView) -> RenderOutput:
        dtype = scene.positions.dtype
        device = scene.positions.device
        mean2d, conic, z, radius, valid = self.project(scene, camera)
        colors = self.colors(scene, camera)
        opac = torch.sigmoid(scene.opacities)

        order = torch.argsort(z, stable=True)
        mean2d, conic, z, radius, valid = mean2d[order], conic[order], z[order], radius[order], valid[order]
        colors, opac = colors[order], opac[order]

        height, width = camera.height, camera.width
        bg = torch.tensor(self.background, dtype=dtype, device=device)
        rgb_rows, depth_rows, alpha_rows = [], [], []
        ts = self.tile_size
        for y0 in range(0, height, ts):
            rgb_tiles, depth_tiles, alpha_tiles = [], [], []
            y1 = min(y0 + ts, height)
            for x0 in range(0, width, ts):
                x1 = min(x0 + ts, width)
                hit = (
                    valid
                    & (mean2d[:, 0] + radius >= x0)
                    & (mean2d[:, 0] - radius <= x1)
                    & (mean2d[:, 1] + radius >= y0)
                    & (mean2d[:, 1] - radius <= y1)
                )
                idx = torch.nonzero(hit, as_tuple=True)[0]
                rgb, depth, alpha = self._composite(
                    mean2d[idx], conic[idx], z[idx], colors[idx], opac[idx], x0, x1, y0, y1, bg
                )
                rgb_tiles.append(rgb)
                depth_tiles.append(depth)
                alpha_tiles.append(alpha)
            rgb_rows.append(torch.cat(rgb_tiles, dim=1))
            depth_rows.append(torch.cat(depth_tiles, dim=1))
            alpha_rows.append(torch.cat(alpha_tiles, dim=1))
        return RenderOutput(
            rgb=torch.cat(rgb_rows, dim=0),
            depth=torch.cat(depth_rows, dim=0),
            alpha=torch.cat(alpha_rows, dim=0),
        )

    def _composite(self, mean2d, conic, z, colors, opac, x0, x1, y0, y1, bg):
        dtype, device = bg.dtype, bg.device
        h, w = y1 - y0, x1 - x0
        if mean2d.shape[0] == 0:
            return (
                bg.expand(h, w, 3).clone(),
                torch.zeros(h, w, dtype=dtype, device=device),
                torch.zeros(h, w, dtype=dtype, device=device),
            )
        ys = torch.arange(y0, y1, dtype=dtype, device=device) + 0.5
        xs = torch.arange(x0, x1, dtype=dtype, device=device) + 0.5
        py, px = torch.meshgrid(ys, xs, indexing="ij")
        dx = px.reshape(1, -1) - mean2d[:, 0:1]
        dy = py.reshape(1, -1) - mean2d[:, 1:2]
        power = -0.5 * (conic[:, 0:1] * dx * dx + conic[:, 2:3] * dy * dy) - conic[:, 1:2] * dx * dy
        alpha = torch.clamp(opac[:, None] * torch.exp(torch.clamp(power, max=0.0)), max=ALPHA_MAX)
        # truncate at 3 sigma so tile culling by the 3-sigma radius is exact
        inside = (power <= 0) & (power >= -0.5 * TRUNCATION**2)
        alpha = torch.where(inside & (alpha >= ALPHA_MIN), alpha, torch.zeros_like(alpha))

        trans = torch.cumprod(1.0 - alpha, dim=0)
        trans_before = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)
        weights = alpha * trans_before  # (G, P)
        acc = 1.0 - trans[-1]
        rgb = weights.T @ colors + trans[-1][:, None] * bg
        depth_sum = weights.T @ z
        depth = torch.where(acc > 1e-6, depth_sum / torch.clamp(acc, min=1e-6), torch.zeros_like(acc))
        return (
            rgb.clamp(0.0, 1.0).reshape(h, w, 3),
            depth.reshape(h, w),
            acc.reshape(h, w),
        )


_DEFAULT = SplatRenderer()


def render(scene: GaussianScene, camera: CameraView, renderer: SplatRenderer | None = None) -> RenderOutput:
    """Render RGB, expected depth and accumulated alpha for one camera."""
    return (renderer or _DEFAULT).render(scene, camera)


def render_batch(
    scene: GaussianScene, cameras: Sequence[CameraView], renderer: SplatRenderer | None = None
) -> List[RenderOutput]:
    if len(cameras) < 1:
        raise ValueError("render_batch needs at least one camera")
    return [render(scene, cam, renderer) for cam in cameras]


def stack_outputs(outputs: Sequence[RenderOutput]):
    """Stack a batch into (N, H, W, 3) rgb, (N, H, W) depth, (N, H, W) alpha."""
    return (
        torch.stack([o.rgb for o in outputs]),
        torch.stack([o.depth for o in outputs]),
        torch.stack([o.alpha for o in outputs]),
    )
