"""Pinhole cameras (OpenCV convention) and camera file readers."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with x right, y down, z forward.

    Pixel ``(u, v)`` covers ``[u, u+1) x [v, v+1)``; its center sits at
    ``(u + 0.5, v + 0.5)`` in the coordinates used by ``fx, fy, cx, cy``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: torch.Tensor  # (4, 4) float64
    name: str = ""

    def __post_init__(self):
        w2c = torch.as_tensor(self.world_to_camera, dtype=torch.float64).clone()
        object.__setattr__(self, "world_to_camera", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        rot = w2c[:3, :3]
        err = (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
        if err > 1e-5:
            raise ValueError(f"rotation block is not orthonormal (error {err:.2e})")

    @property
    def camera_to_world(self) -> torch.Tensor:
        rot = self.world_to_camera[:3, :3]
        t = self.world_to_camera[:3, 3]
        c2w = torch.eye(4, dtype=torch.float64)
        c2w[:3, :3] = rot.T
        c2w[:3, 3] = -rot.T @ t
        return c2w

    @property
    def center(self) -> torch.Tensor:
        return self.camera_to_world[:3, 3]

    @property
    def intrinsics(self) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=torch.float64,
        )

    def resized(self, width: int, height: int) -> "CameraView":
        """Rescale intrinsics to a new image size."""
        sx, sy = width / self.width, height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> torch.Tensor:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear at the top of the image
    (image y grows downward, so the default is -y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return torch.from_numpy(w2c)


def _read_colmap_lines(path: Path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


def load_colmap_text(sparse_dir) -> List[CameraView]:
    """Read ``cameras.txt`` and ``images.txt`` from a COLMAP text model.

    Distortion parameters are ignored. Cameras are returned sorted by image
    name.
    """
    sparse_dir = Path(sparse_dir)
    intrinsics = {}
    for line in _read_colmap_lines(sparse_dir / "cameras.txt"):
        parts = line.split()
        cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model in ("SIMPLE_PINHOLE", "SIMPLE_RADIAL", "RADIAL", "SIMPLE_RADIAL_FISHEYE"):
            f, cx, cy = params[:3]
            fx = fy = f
        elif model in ("PINHOLE", "OPENCV", "OPENCV_FISHEYE", "FULL_OPENCV"):
            fx, fy, cx, cy = params[:4]
        else:
            raise ValueError(f"unsupported COLMAP camera model {model}")
        intrinsics[cam_id] = (fx, fy, cx, cy, w, h)

    with open(sparse_dir / "images.txt") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    # pose line followed by a (possibly empty) 2D-points line
    views = []
    for pose_line in lines[0::2]:
        parts = pose_line.split()
        if not parts:
            continue
        qvec = [float(v) for v in parts[1:5]]
        tvec = [float(v) for v in parts[5:8]]
        cam_id = int(parts[8])
        name = " ".join(parts[9:])
        fx, fy, cx, cy, w, h = intrinsics[cam_id]
        w2c = np.eye(4)
        w2c[:3, :3] = quaternion_to_matrix(qvec)
        w2c[:3, 3] = tvec
        views.append(CameraView(fx, fy, cx, cy, w, h, torch.from_numpy(w2c), name=name))
    return sorted(views, key=lambda v: v.name)


def load_transforms_json(path) -> List[CameraView]:
    """Read a NeRF-style ``transforms.json``.

    Frames carry camera-to-world matrices in the OpenGL convention (y up,
    z backward); they are converted to OpenCV world-to-camera matrices.
    Intrinsics come from ``fl_x/fl_y/cx/cy/w/h`` (per file or per frame) or
    from ``camera_angle_x`` together with ``w``/``h``.
    """
    path = Path(path)
    with open(path) as fh:
        meta = json.load(fh)

    views = []
    for i, frame in enumerate(meta["frames"]):
        info = {**meta, **frame}
        w = int(info.get("w", info.get("width", 0)))
        h = int(info.get("h", info.get("height", 0)))
        if not w or not h:
            raise ValueError(f"{path}: image size (w, h) missing for frame {i}")
        if "fl_x" in info:
            fx = float(info["fl_x"])
            fy = float(info.get("fl_y", fx))
        elif "camera_angle_x" in info:
            fx = fy = 0.5 * w / math.tan(0.5 * float(info["camera_angle_x"]))
        else:
            raise ValueError(f"{path}: no focal length for frame {i}")
        cx = float(info.get("cx", w / 2))
        cy = float(info.get("cy", h / 2))
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        c2w[:3, 1:3] *= -1
        w2c = np.linalg.inv(c2w)
        # re-orthonormalize to absorb float noise in stored matrices
        u, _, vt = np.linalg.svd(w2c[:3, :3])
        w2c[:3, :3] = u @ vt
        name = str(frame.get("file_path", f"frame_{i:05d}"))
        views.append(CameraView(fx, fy, cx, cy, w, h, torch.from_numpy(w2c), name=name))
    return views


def write_transforms_json(cameras: Sequence[CameraView], path) -> None:
    """Inverse of :func:`load_transforms_json` (per-frame intrinsics)."""
    frames = []
    for i, cam in enumerate(cameras):
        c2w = cam.camera_to_world.numpy().copy()
        c2w[:3, 1:3] *= -1
        frames.append(
            {
                "file_path": cam.name or f"frame_{i:05d}",
                "fl_x": cam.fx,
                "fl_y": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "w": cam.width,
                "h": cam.height,
                "transform_matrix": c2w.tolist(),
            }
        )
    with open(path, "w") as fh:
        json.dump({"frames": frames}, fh, indent=2)


def load_cameras(source) -> List[CameraView]:
    """Load cameras from a transforms.json file or a COLMAP text directory."""
    source = Path(source)
    if source.is_dir():
        for candidate in (source, source / "sparse" / "0", source / "sparse"):
            if (candidate / "cameras.txt").exists():
                return load_colmap_text(candidate)
        if (source / "transforms.json").exists():
            return load_transforms_json(source / "transforms.json")
        raise FileNotFoundError(f"no cameras.txt or transforms.json under {source}")
    if not source.exists():
        raise FileNotFoundError(os.fspath(source))
    return load_transforms_json(source)


def orbit_path(
    center, radius: float, height: float, n: int, width: int, height_px: int, fov_deg: float = 60.0
) -> List[CameraView]:
    """Cameras on a horizontal circle around ``center``, all looking at it.

    The circle lies in the plane y = center.y - height (y down is image-down,
    so a positive ``height`` places cameras above the target).
    """
    center = np.asarray(center, dtype=np.float64)
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        theta = 2 * math.pi * i / n
        eye = center + np.array([radius * math.sin(theta), -height, -radius * math.cos(theta)])
        cams.append(
            CameraView(f, f, width / 2, height_px / 2, width, height_px, look_at(eye, center), name=f"orbit_{i:04d}")
        )
    return cams
