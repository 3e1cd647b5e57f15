import json
import math

import numpy as np
import pytest
import torch

from splatstyle.cameras import (
    CameraView,
    load_cameras,
    load_colmap_text,
    load_transforms_json,
    look_at,
    orbit_path,
    quaternion_to_matrix,
    write_transforms_json,
)
from oracles import random_camera


def test_w2c_c2w_inverse(rng):
    for _ in range(20):
        cam = random_camera(rng)
        prod = cam.world_to_camera @ cam.camera_to_world
        assert torch.allclose(prod, torch.eye(4, dtype=torch.float64), atol=1e-6)


def test_invalid_cameras():
    with pytest.raises(ValueError):
        CameraView(0.0, 1.0, 1, 1, 4, 4, torch.eye(4))
    bad = torch.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError, match="orthonormal"):
        CameraView(1.0, 1.0, 1, 1, 4, 4, bad)


def test_look_at_points_camera_at_target():
    w2c = look_at((1.0, 2.0, -3.0), (0.0, 0.0, 0.0))
    p = w2c @ torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12
    assert p[2] == pytest.approx(math.sqrt(14.0))


def test_look_at_up_is_image_up():
    w2c = look_at((0.0, 0.0, -5.0), (0.0, 0.0, 0.0))
    above = w2c @ torch.tensor([0.0, -1.0, 0.0, 1.0], dtype=torch.float64)
    assert above[1] < 0  # image y grows downward


def test_quaternion_identity_and_rotation():
    assert np.allclose(quaternion_to_matrix([1, 0, 0, 0]), np.eye(3))
    r = quaternion_to_matrix([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)])
    assert np.allclose(r @ [1, 0, 0], [0, 1, 0])


def test_resized_scales_intrinsics():
    cam = CameraView(100.0, 80.0, 32.0, 24.0, 64, 48, torch.eye(4))
    small = cam.resized(32, 24)
    assert (small.fx, small.fy, small.cx, small.cy) == (50.0, 40.0, 16.0, 12.0)
    assert torch.equal(small.world_to_camera, cam.world_to_camera)


def test_colmap_text(tmp_path):
    (tmp_path / "cameras.txt").write_text(
        "# Camera list\n1 PINHOLE 64 48 100 90 32 24\n2 SIMPLE_RADIAL 32 32 40 16 16 0.01\n"
    )
    (tmp_path / "images.txt").write_text(
        "# Image list\n"
        "1 1 0 0 0 0.5 -1 2 1 b.png\n"
        "10.0 20.0 -1\n"
        "2 0.7071067811865476 0 0.7071067811865476 0 0 0 3 2 a.png\n"
        "\n"
    )
    cams = load_colmap_text(tmp_path)
    assert [c.name for c in cams] == ["a.png", "b.png"]
    a, b = cams
    assert (b.fx, b.fy, b.cx, b.cy, b.width, b.height) == (100, 90, 32, 24, 64, 48)
    assert (a.fx, a.fy, a.width) == (40, 40, 32)
    assert torch.allclose(b.world_to_camera[:3, 3], torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
    # 90 degrees about y: world x maps to camera -z
    assert torch.allclose(a.world_to_camera[:3, :3] @ torch.tensor([1.0, 0, 0], dtype=torch.float64),
                          torch.tensor([0, 0, -1.0], dtype=torch.float64), atol=1e-9)
    assert len(load_cameras(tmp_path)) == 2


def test_transforms_round_trip(tmp_path, rng):
    cams = [random_camera(rng, size=24, name=f"v{i}") for i in range(5)]
    write_transforms_json(cams, tmp_path / "t.json")
    loaded = load_transforms_json(tmp_path / "t.json")
    for a, b in zip(cams, loaded):
        assert torch.allclose(a.world_to_camera, b.world_to_camera, atol=1e-9)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height, a.name) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height,
                                                                       b.name)


def test_transforms_opengl_convention(tmp_path):
    # OpenGL camera at z=+4 looking down -z (identity rotation)
    c2w = np.eye(4)
    c2w[2, 3] = 4.0
    meta = {"camera_angle_x": math.radians(90), "w": 20, "h": 10,
            "frames": [{"file_path": "f0", "transform_matrix": c2w.tolist()}]}
    (tmp_path / "transforms.json").write_text(json.dumps(meta))
    cam = load_cameras(tmp_path)[0]
    assert cam.fx == pytest.approx(10.0)
    origin = cam.world_to_camera @ torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    assert origin[2] == pytest.approx(4.0)  # in front of the camera
    up = cam.world_to_camera @ torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64)
    assert up[1] < 0  # world +y is image-up


def test_missing_camera_source(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cameras(tmp_path / "nope.json")
    with pytest.raises(FileNotFoundError):
        load_cameras(tmp_path)


def test_orbit_path_distance_and_count():
    cams = orbit_path((1.0, 0.0, 0.0), 3.0, 0.5, 7, 32, 24, fov_deg=60)
    assert len(cams) == 7
    for c in cams:
        assert float((c.center - torch.tensor([1.0, 0, 0], dtype=torch.float64)).norm()) == pytest.approx(
            math.hypot(3.0, 0.5))
        assert c.fx == pytest.approx(16 / math.tan(math.radians(30)))
