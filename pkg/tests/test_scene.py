import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from plyfile import PlyData, PlyElement

from splatstyle.renderer import render
from splatstyle.scene import (
    FROZEN_FIELDS,
    TRAINABLE_FIELDS,
    EmptySceneError,
    GaussianScene,
    SceneFormatError,
    load_scene,
    num_rest_coeffs,
    partition_parameters,
    save_scene,
    sh_degree_from_rest_count,
)
from splatstyle.toy import toy_scene


def write_raw_ply(path, names, count=3, skip=()):
    arr = np.zeros(count, dtype=[(n, "f4") for n in names if n not in skip])
    for n in arr.dtype.names:
        arr[n] = np.arange(count, dtype=np.float32) * 0.1
    if "rot_0" in arr.dtype.names:
        arr["rot_0"] = 1.0
    PlyData([PlyElement.describe(arr, "vertex")]).write(str(path))


def base_names(n_rest):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    return names + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


@pytest.mark.parametrize("n_rest,degree", [(0, 0), (9, 1), (24, 2), (45, 3)])
def test_degree_inferred_from_rest_count(tmp_path, n_rest, degree):
    write_raw_ply(tmp_path / "s.ply", base_names(n_rest))
    scene = load_scene(tmp_path / "s.ply")
    assert scene.sh_degree == degree
    assert scene.sh_rest.shape == (3, 3, num_rest_coeffs(degree))


def test_rest_count_formula():
    assert 3 * num_rest_coeffs(3) == 45
    with pytest.raises(SceneFormatError):
        sh_degree_from_rest_count(10)
    with pytest.raises(SceneFormatError):
        sh_degree_from_rest_count(12)


def test_missing_property_is_named(tmp_path):
    write_raw_ply(tmp_path / "s.ply", base_names(0), skip=("scale_1",))
    with pytest.raises(SceneFormatError, match="scale_1"):
        load_scene(tmp_path / "s.ply")


def test_empty_ply(tmp_path):
    write_raw_ply(tmp_path / "s.ply", base_names(0), count=0)
    with pytest.raises(EmptySceneError):
        load_scene(tmp_path / "s.ply")


def test_quaternions_normalized_on_load(tmp_path):
    scene = toy_scene(20)
    scene.rotations = scene.rotations * torch.linspace(0.5, 3.0, 20)[:, None]
    save_scene(scene, tmp_path / "s.ply")
    loaded = load_scene(tmp_path / "s.ply")
    assert torch.all((loaded.rotations.norm(dim=-1) - 1).abs() <= 1e-5)


@pytest.mark.parametrize("degree", [0, 1, 3])
def test_round_trip_bit_exact(tmp_path, degree):
    scene = toy_scene(100, sh_degree=degree, seed=3)
    save_scene(scene, tmp_path / "s.ply")
    loaded = load_scene(tmp_path / "s.ply")
    assert loaded.sh_degree == degree
    for name in FROZEN_FIELDS + TRAINABLE_FIELDS:
        assert torch.equal(getattr(loaded, name), getattr(scene, name)), name


def test_degree_zero_saves_no_rest_fields(tmp_path):
    save_scene(toy_scene(5, sh_degree=0), tmp_path / "s.ply")
    props = [p.name for p in PlyData.read(str(tmp_path / "s.ply"))["vertex"].properties]
    assert not any(p.startswith("f_rest") for p in props)
    assert props[:6] == ["x", "y", "z", "nx", "ny", "nz"]


def test_saved_ply_layout_is_binary_little_endian(tmp_path):
    save_scene(toy_scene(5, sh_degree=1), tmp_path / "s.ply")
    ply = PlyData.read(str(tmp_path / "s.ply"))
    assert ply.byte_order == "<" and not ply.text
    assert np.all(ply["vertex"]["nx"] == 0)


def test_rest_layout_is_channel_major(tmp_path):
    scene = toy_scene(2, sh_degree=1)
    scene.sh_rest = torch.arange(2 * 3 * 3, dtype=torch.float32).reshape(2, 3, 3)
    save_scene(scene, tmp_path / "s.ply")
    v = PlyData.read(str(tmp_path / "s.ply"))["vertex"]
    # first three f_rest values belong to the red channel
    assert [float(v[f"f_rest_{i}"][0]) for i in range(9)] == list(range(9))


def test_stylized_scene_reload_renders_identically(tmp_path, front_camera):
    scene = toy_scene(50, seed=1)
    scene.sh_dc = scene.sh_dc + 0.3 * torch.randn(scene.sh_dc.shape, generator=torch.Generator().manual_seed(0))
    save_scene(scene, tmp_path / "s.ply")
    a = render(scene, front_camera).rgb
    b = render(load_scene(tmp_path / "s.ply"), front_camera).rgb
    assert torch.sqrt(((a - b) ** 2).mean()) <= 1e-6


def test_partition_sets():
    scene = toy_scene(10)
    part = partition_parameters(scene)
    assert set(part.frozen) == set(FROZEN_FIELDS) and len(part.frozen) == 4
    assert set(part.trainable) == set(TRAINABLE_FIELDS) and len(part.trainable) == 2
    assert not set(part.frozen) & set(part.trainable)
    assert all(t.requires_grad for t in part.trainable.values())
    assert not any(t.requires_grad for t in part.frozen.values())


def test_partition_optimization_keeps_geometry(front_camera):
    scene = toy_scene(30)
    before = {n: getattr(scene, n).clone() for n in FROZEN_FIELDS}
    dc0 = scene.sh_dc.clone()
    part = partition_parameters(scene)
    opt = torch.optim.Adam(part.trainable_parameters(), lr=0.01)
    for _ in range(10):
        opt.zero_grad()
        loss = (render(scene, front_camera).rgb - 0.2).pow(2).mean()
        loss.backward()
        opt.step()
    for n in FROZEN_FIELDS:
        assert torch.equal(getattr(scene, n), before[n])
    assert (scene.sh_dc != dc0).any()


def test_scene_validation():
    scene = toy_scene(4)
    with pytest.raises(ValueError):
        GaussianScene(scene.positions, scene.rotations[:3], scene.scales, scene.opacities, scene.sh_dc,
                      scene.sh_rest, scene.sh_degree)
    with pytest.raises(ValueError):
        GaussianScene(scene.positions, scene.rotations, scene.scales, scene.opacities, scene.sh_dc,
                      scene.sh_rest, 2)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 30), degree=st.integers(0, 3), seed=st.integers(0, 1000))
def test_round_trip_property(tmp_path_factory, m, degree, seed):
    path = tmp_path_factory.mktemp("rt") / "s.ply"
    scene = toy_scene(m, sh_degree=degree, seed=seed)
    save_scene(scene, path)
    loaded = load_scene(path)
    for name in FROZEN_FIELDS + TRAINABLE_FIELDS:
        assert torch.equal(getattr(loaded, name), getattr(scene, name))
