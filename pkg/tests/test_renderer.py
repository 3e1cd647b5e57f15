import math

import pytest
import torch

from splatstyle.cameras import CameraView
from splatstyle.renderer import (
    SH_C0,
    SplatRenderer,
    eval_sh,
    render,
    render_batch,
    rgb_to_sh_dc,
    stack_outputs,
)
from splatstyle.scene import GaussianScene
from splatstyle.toy import toy_cameras, toy_scene


def one_gaussian(z=5.0, scale=0.2, opacity=8.0, gray=0.6, dtype=torch.float64):
    return GaussianScene(
        positions=torch.tensor([[0.0, 0.0, z]], dtype=dtype),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=dtype),
        scales=torch.full((1, 3), math.log(scale), dtype=dtype),
        opacities=torch.tensor([opacity], dtype=dtype),
        sh_dc=rgb_to_sh_dc(torch.full((1, 3), gray, dtype=dtype)),
        sh_rest=torch.zeros(1, 3, 0, dtype=dtype),
        sh_degree=0,
    )


def identity_camera(size=32, f=32.0):
    return CameraView(f, f, size / 2, size / 2, size, size, torch.eye(4, dtype=torch.float64))


def test_single_splat_matches_analytic_compositing():
    cam = identity_camera()
    scene = one_gaussian()
    out = render(scene, cam)
    # pixel (16, 16) center is offset (0.5, 0.5) from the projected mean
    var = (cam.fx / 5.0 * 0.2) ** 2 + 0.3
    alpha = min(1 / (1 + math.exp(-8.0)) * math.exp(-0.5 * (0.25 + 0.25) / var), 0.99)
    assert float(out.alpha[16, 16]) == pytest.approx(alpha, rel=1e-9)
    assert float(out.rgb[16, 16, 0]) == pytest.approx(alpha * 0.6, rel=1e-9)
    assert float(out.depth[16, 16]) == pytest.approx(5.0, rel=0.02)


def test_transparent_scene_is_background():
    scene = toy_scene(30, dtype=torch.float64)
    scene.opacities = torch.full_like(scene.opacities, -40.0)
    r = SplatRenderer(background=(0.2, 0.4, 0.6))
    out = r(scene, toy_cameras(1)[0])
    assert torch.all(out.alpha == 0)
    assert torch.allclose(out.rgb, torch.tensor([0.2, 0.4, 0.6], dtype=torch.float64).expand_as(out.rgb))
    assert torch.all(out.depth == 0)


def test_camera_behind_scene_gives_empty_render():
    cam = CameraView(32.0, 32.0, 16, 16, 32, 32, torch.diag(torch.tensor([-1.0, 1.0, -1.0, 1.0],
                                                                          dtype=torch.float64)))
    out = render(one_gaussian(), cam)
    assert float(out.alpha.max()) == 0.0


def test_brighter_dc_brightens_covered_pixels():
    cam = identity_camera()
    dark = render(one_gaussian(gray=0.3), cam)
    bright = render(one_gaussian(gray=0.6), cam)
    covered = dark.alpha > 0.05
    assert covered.any()
    assert torch.all(bright.rgb[covered] > dark.rgb[covered])


def test_depth_positive_where_opaque():
    scene = toy_scene(100)
    for cam in toy_cameras(4):
        out = render(scene, cam)
        assert torch.all(out.depth[out.alpha > 0.5] > 0)
        assert torch.isfinite(out.rgb).all()
        assert float(out.rgb.min()) >= 0 and float(out.rgb.max()) <= 1


def test_render_is_deterministic():
    scene, cam = toy_scene(100), toy_cameras(1)[0]
    a, b = render(scene, cam), render(scene, cam)
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.depth, b.depth)


def test_tiling_does_not_change_result():
    scene, cam = toy_scene(100, dtype=torch.float64), toy_cameras(1, size=48)[0]
    a = SplatRenderer(tile_size=64).render(scene, cam)
    b = SplatRenderer(tile_size=16).render(scene, cam)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-12)
    assert torch.allclose(a.depth, b.depth, atol=1e-12)


def test_batch_equals_singles_and_is_permutation_equivariant():
    scene, cams = toy_scene(60), toy_cameras(4)
    batch = render_batch(scene, cams)
    assert len(batch) == 4
    for out, cam in zip(batch, cams):
        assert torch.equal(out.rgb, render(scene, cam).rgb)
    perm = [2, 0, 3, 1]
    permuted = render_batch(scene, [cams[i] for i in perm])
    for k, i in enumerate(perm):
        assert torch.equal(permuted[k].rgb, batch[i].rgb)
    rgb, depth, alpha = stack_outputs(batch)
    assert rgb.shape == (4, 32, 32, 3) and depth.shape == alpha.shape == (4, 32, 32)
    with pytest.raises(ValueError):
        render_batch(scene, [])


def test_gradient_reaches_only_colors():
    scene = toy_scene(10, dtype=torch.float64)
    for name in ("sh_dc", "sh_rest", "positions"):
        getattr(scene, name).requires_grad_(True)
    render(scene, toy_cameras(1)[0]).rgb.mean().backward()
    assert scene.sh_dc.grad.abs().sum() > 0
    assert scene.sh_rest.grad.abs().sum() > 0


def test_finite_difference_gradient_sh_dc():
    scene = toy_scene(10, dtype=torch.float64, seed=2)
    cam = toy_cameras(1, size=32)[0]
    scene.sh_dc.requires_grad_(True)
    render(scene, cam).rgb.mean().backward()
    analytic = scene.sh_dc.grad.clone()
    eps = 1e-5
    checked = 0
    for idx in [(i, c) for i in range(10) for c in range(3)]:
        if abs(float(analytic[idx])) < 1e-6:
            continue
        with torch.no_grad():
            plus, minus = scene.sh_dc.detach().clone(), scene.sh_dc.detach().clone()
            plus[idx] += eps
            minus[idx] -= eps
        s_plus, s_minus = toy_scene(10, dtype=torch.float64, seed=2), toy_scene(10, dtype=torch.float64, seed=2)
        s_plus.sh_dc, s_minus.sh_dc = plus, minus
        fd = (render(s_plus, cam).rgb.mean() - render(s_minus, cam).rgb.mean()) / (2 * eps)
        rel = abs(float(fd) - float(analytic[idx])) / max(abs(float(fd)), abs(float(analytic[idx])))
        assert rel < 1e-2, (idx, float(fd), float(analytic[idx]))
        checked += 1
    assert checked >= 5


def test_eval_sh_degree0_and_rgb_inverse():
    rgb = torch.tensor([[0.1, 0.5, 0.9]], dtype=torch.float64)
    sh = rgb_to_sh_dc(rgb)[..., None]
    out = eval_sh(0, sh, torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)) + 0.5
    assert torch.allclose(out, rgb)
    assert SH_C0 == pytest.approx(1 / (2 * math.sqrt(math.pi)))


def test_eval_sh_degree1_matches_closed_form():
    sh = torch.zeros(1, 1, 4, dtype=torch.float64)
    sh[0, 0, 1], sh[0, 0, 2], sh[0, 0, 3] = 1.0, 2.0, 3.0
    d = torch.tensor([[0.6, 0.0, 0.8]], dtype=torch.float64)
    c1 = math.sqrt(3 / (4 * math.pi))
    expected = -c1 * 1.0 * 0.0 + c1 * 2.0 * 0.8 - c1 * 3.0 * 0.6
    assert float(eval_sh(1, sh, d)) == pytest.approx(expected)
