"""Gaussian scene container, PLY persistence and the geometry/color split."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterator, Tuple

import numpy as np
import torch
from plyfile import PlyData, PlyElement

FROZEN_FIELDS = ("positions", "rotations", "scales", "opacities")
TRAINABLE_FIELDS = ("sh_dc", "sh_rest")


class SceneFormatError(ValueError):
    """Raised when a PLY file does not carry the 3DGS vertex layout."""


class EmptySceneError(ValueError):
    pass


def num_rest_coeffs(sh_degree: int) -> int:
    return (sh_degree + 1) ** 2 - 1


def sh_degree_from_rest_count(n_rest: int) -> int:
    """Infer the SH degree from the number of ``f_rest_*`` properties."""
    if n_rest % 3:
        raise SceneFormatError(f"f_rest property count {n_rest} is not a multiple of 3")
    coeffs = n_rest // 3 + 1
    degree = int(round(np.sqrt(coeffs))) - 1
    if (degree + 1) ** 2 != coeffs:
        raise SceneFormatError(f"f_rest property count {n_rest} matches no SH degree")
    return degree


@dataclass
class GaussianScene:
    """Parameter set of a 3D Gaussian Splatting scene.

    All tensors share the leading dimension M (number of Gaussians).

    Attributes:
        positions: (M, 3) world-space centers.
        rotations: (M, 4) quaternions (w, x, y, z).
        scales: (M, 3) log-scales.
        opacities: (M,) pre-sigmoid opacities.
        sh_dc: (M, 3) degree-0 SH coefficients.
        sh_rest: (M, 3, K) higher-order SH coefficients, K = (deg+1)^2 - 1.
        sh_degree: active SH degree.
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    sh_dc: torch.Tensor
    sh_rest: torch.Tensor
    sh_degree: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def num_gaussians(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        m = self.positions.shape[0]
        if m == 0:
            raise EmptySceneError("scene contains zero Gaussians")
        expected = {
            "positions": (m, 3),
            "rotations": (m, 4),
            "scales": (m, 3),
            "opacities": (m,),
            "sh_dc": (m, 3),
            "sh_rest": (m, 3, num_rest_coeffs(self.sh_degree)),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                raise ValueError(f"{name} has shape {actual}, expected {shape}")

    def tensors(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for f in fields(self):
            if f.name != "sh_degree":
                yield f.name, getattr(self, f.name)

    def to(self, *args, **kwargs) -> "GaussianScene":
        moved = {name: t.to(*args, **kwargs) for name, t in self.tensors()}
        return replace(self, **moved)

    def clone(self) -> "GaussianScene":
        copies = {name: t.detach().clone() for name, t in self.tensors()}
        return replace(self, **copies)

    def normalized_rotations(self) -> torch.Tensor:
        return torch.nn.functional.normalize(self.rotations, dim=-1)


@dataclass
class ParameterPartition:
    """Frozen geometry tensors and trainable color tensors of one scene."""

    frozen: Dict[str, torch.Tensor] = field(default_factory=dict)
    trainable: Dict[str, torch.Tensor] = field(default_factory=dict)

    def trainable_parameters(self):
        return list(self.trainable.values())


def partition_parameters(scene: GaussianScene) -> ParameterPartition:
    """Freeze geometry and enable gradients on the SH color coefficients.

    The scene is modified in place: its color tensors become leaf tensors
    with ``requires_grad=True`` and geometry tensors are detached.
    """
    for name in FROZEN_FIELDS:
        setattr(scene, name, getattr(scene, name).detach().requires_grad_(False))
    for name in TRAINABLE_FIELDS:
        setattr(scene, name, getattr(scene, name).detach().clone().requires_grad_(True))
    return ParameterPartition(
        frozen={name: getattr(scene, name) for name in FROZEN_FIELDS},
        trainable={name: getattr(scene, name) for name in TRAINABLE_FIELDS},
    )


def _ply_attribute_names(sh_degree: int):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * num_rest_coeffs(sh_degree))]
    names.append("opacity")
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def _stack(vertex, names):
    missing = [n for n in names if n not in vertex]
    if missing:
        raise SceneFormatError(f"PLY is missing required property '{missing[0]}'")
    return np.stack([np.asarray(vertex[n], dtype=np.float32) for n in names], axis=1)


def load_scene(path) -> GaussianScene:
    """Read a 3DGS checkpoint PLY (binary or ASCII) into a scene.

    Quaternions are normalized on load; the SH degree is inferred from the
    number of ``f_rest_*`` properties.
    """
    ply = PlyData.read(os.fspath(path))
    try:
        element = ply["vertex"]
    except KeyError:
        raise SceneFormatError("PLY has no 'vertex' element") from None
    names = {p.name for p in element.properties}
    vertex = {n: element[n] for n in names}
    if element.count == 0:
        raise EmptySceneError(f"{path} contains zero Gaussians")

    rest_names = sorted(
        (n for n in names if n.startswith("f_rest_")), key=lambda n: int(n.rsplit("_", 1)[1])
    )
    degree = sh_degree_from_rest_count(len(rest_names))
    expected_rest = [f"f_rest_{i}" for i in range(len(rest_names))]
    if rest_names != expected_rest:
        raise SceneFormatError("f_rest properties are not contiguously numbered")

    positions = _stack(vertex, ["x", "y", "z"])
    sh_dc = _stack(vertex, ["f_dc_0", "f_dc_1", "f_dc_2"])
    opacities = _stack(vertex, ["opacity"])[:, 0]
    scales = _stack(vertex, ["scale_0", "scale_1", "scale_2"])
    rotations = _stack(vertex, ["rot_0", "rot_1", "rot_2", "rot_3"])
    m = positions.shape[0]
    if rest_names:
        sh_rest = _stack(vertex, rest_names).reshape(m, 3, num_rest_coeffs(degree))
    else:
        sh_rest = np.zeros((m, 3, 0), dtype=np.float32)

    # renormalize only off-unit quaternions so load(save(scene)) is bit-exact
    rotations = torch.from_numpy(rotations)
    norms = rotations.double().norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise SceneFormatError("PLY contains a zero quaternion")
    off = (norms - 1).abs() > 1e-6
    rotations = torch.where(off, (rotations.double() / norms).float(), rotations)
    return GaussianScene(
        positions=torch.from_numpy(positions),
        rotations=rotations,
        scales=torch.from_numpy(scales),
        opacities=torch.from_numpy(opacities),
        sh_dc=torch.from_numpy(sh_dc),
        sh_rest=torch.from_numpy(np.ascontiguousarray(sh_rest)),
        sh_degree=degree,
    )


def save_scene(scene: GaussianScene, path) -> None:
    """Write ``scene`` as a binary little-endian 3DGS PLY (float32)."""
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    m = scene.num_gaussians

    def arr(t):
        return t.detach().cpu().to(torch.float32).numpy().reshape(m, -1)

    columns = np.concatenate(
        [
            arr(scene.positions),
            np.zeros((m, 3), dtype=np.float32),
            arr(scene.sh_dc),
            arr(scene.sh_rest),
            arr(scene.opacities),
            arr(scene.scales),
            arr(scene.rotations),
        ],
        axis=1,
    )
    names = _ply_attribute_names(scene.sh_degree)
    elements = np.empty(m, dtype=[(n, "f4") for n in names])
    for i, n in enumerate(names):
        elements[n] = columns[:, i]
    try:
        PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(path)
    except OSError as exc:
        raise OSError(f"cannot write scene to {path}: {exc}") from exc
