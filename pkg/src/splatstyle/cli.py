"""Command-line driver: ``splatstyle {stylize,evaluate,render,make-toy}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import metrics as M
from . import plotting
from .backbone import create_backbone
from .backbone.sd import CACHE_ENV, BackboneUnavailable
from .cameras import CameraView, load_cameras, orbit_path, write_transforms_json
from .config import (
    ABLATIONS,
    ConfigError,
    RunConfig,
    apply_ablations,
    apply_overrides,
    dump_config,
    from_dict,
    load_config_file,
)
from .geometry import build_guidance
from .images import load_frames, load_image, save_frames, save_gif, save_image
from .losses import EmptyMaskError
from .renderer import SplatRenderer, render_batch, stack_outputs
from .scene import EmptySceneError, SceneFormatError, load_scene, save_scene
from .trainer import NumericalError, Stylizer, run

log = logging.getLogger("splatstyle")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstyle",
        description="Color-only style transfer for 3D Gaussian splatting scenes.",
        epilog=f"Any config field can be overridden with --section.key=value. "
        f"Pretrained weights are cached under ${CACHE_ENV} when set.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--scene", help="3DGS PLY file")
        p.add_argument("--cameras", help="transforms.json or COLMAP text directory")
        p.add_argument("--style", help="style image")
        p.add_argument("--output", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (training and toy backbone)")
        p.add_argument("--backbone", choices=["tiny", "sd15"], help="feature backbone")

    p = sub.add_parser("stylize", help="optimize SH colors toward a style image")
    common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS),
                   help="disable a component (repeatable)")
    p.add_argument("--timestep", help="fixed:T, random or decreasing")
    p.add_argument("--style-query", choices=["content", "rendered"],
                   help="branch whose queries read the style keys/values")
    p.add_argument("--resume", type=int, help="resume from checkpoint step in <output>/checkpoints")

    p = sub.add_parser("evaluate", help="compute the metric table for a stylized scene or frames")
    common(p)
    p.add_argument("--original", help="unstylized PLY used for content frames")
    p.add_argument("--frames", help="directory of stylized PNG frames")
    p.add_argument("--content-frames", help="directory of content PNG frames")
    p.add_argument("--no-pretrained", action="store_true", help="skip metrics that need pretrained networks")

    p = sub.add_parser("render", help="render a camera path to PNGs")
    common(p)
    p.add_argument("--camera-path", help="camera path file (defaults to --cameras, else an orbit)")
    p.add_argument("--frames", type=int, help="orbit length when no path file is given")
    p.add_argument("--gif", action="store_true")
    p.add_argument("--debug-guidance", action="store_true", help="dump g, v and M_G heatmaps")

    p = sub.add_parser("make-toy", help="write a small synthetic scene, cameras, style image and config")
    p.add_argument("directory")
    p.add_argument("--gaussians", type=int, default=100)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args: argparse.Namespace, overrides: Sequence[str]) -> RunConfig:
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in ("scene", "cameras", "style", "output"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    training = data.setdefault("training", {})
    if args.seed is not None:
        training["seed"] = args.seed
        data.setdefault("backbone", {})["seed"] = args.seed
    if args.backbone is not None:
        data.setdefault("backbone", {})["kind"] = args.backbone
    if getattr(args, "iterations", None) is not None:
        training["iterations"] = args.iterations
    if getattr(args, "timestep", None) is not None:
        training["timestep"] = args.timestep
    if getattr(args, "style_query", None) is not None:
        training["style_query_source"] = args.style_query
    data = apply_ablations(data, getattr(args, "ablate", []) or [])
    data = apply_overrides(data, overrides)
    return from_dict(data)


def make_backbone(cfg: RunConfig):
    b = cfg.backbone
    if b.kind == "tiny":
        return create_backbone("tiny", seed=b.seed, resolution=b.resolution)
    return create_backbone(b.kind, model_id=b.model_id, resolution=b.resolution, dtype=b.dtype, device=b.device)


def camera_path(cfg: RunConfig, scene, path_file: Optional[str] = None, n: Optional[int] = None) -> List[CameraView]:
    source = path_file or cfg.render.camera_path or cfg.cameras
    if source:
        cams = load_cameras(source)
    else:
        pos = scene.positions.detach().double()
        center = pos.median(dim=0).values
        radius = 3.0 * float((pos - center).norm(dim=-1).quantile(0.9)) + 1e-3
        size = cfg.render.width or 128
        cams = orbit_path(center.tolist(), radius, 0.3 * radius, n or cfg.render.frames, size,
                          cfg.render.height or size, fov_deg=cfg.render.fov_deg)
    if cfg.render.width and cfg.render.height:
        cams = [c.resized(cfg.render.width, cfg.render.height) for c in cams]
    return cams


def render_path(scene, cameras, background=(0.0, 0.0, 0.0)):
    renderer = SplatRenderer(background=background)
    with torch.no_grad():
        outs = [render_batch(scene, [c], renderer)[0] for c in cameras]
    return stack_outputs(outs)


def cmd_stylize(cfg: RunConfig, resume: Optional[int] = None) -> int:
    cfg.require("scene", "cameras", "style")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    log.info("seed %d, backbone %s", cfg.training.seed, cfg.backbone.kind)

    scene = load_scene(cfg.scene)
    cameras = load_cameras(cfg.cameras)
    backbone = make_backbone(cfg)
    style = load_image(cfg.style, backbone.resolution)

    stylizer = None
    if resume is not None:
        stylizer = Stylizer.from_checkpoint(out / "checkpoints", resume, cameras, style, backbone, cfg.training)
        scene = stylizer.scene
    started = time.perf_counter()
    result, history = run(scene, cameras, style, cfg.training, backbone, output_dir=out, stylizer=stylizer)
    elapsed = time.perf_counter() - started

    if history:
        plotting.loss_curves(history, out / "loss_curve.png", smooth=10 if len(history) > 50 else 0)
    original = load_scene(cfg.scene)
    h, w = backbone.resolution
    preview = [c.resized(w, h) for c in cameras[: cfg.render.previews]]
    content_rgb, _, _ = render_path(original, preview, cfg.training.background)
    styl_rgb, _, _ = render_path(result, preview, cfg.training.background)
    plotting.preview_grid({"content": list(content_rgb), "stylized": list(styl_rgb)}, out / "preview.png", style)
    save_frames(list(styl_rgb), out / "previews", prefix="stylized")

    summary = {
        "iterations": len(history),
        "seed": cfg.training.seed,
        "runtime_s": elapsed,
        "first_loss": history[0]["total"] if history else None,
        "final_loss": history[-1]["total"] if history else None,
        "backbone_calls": dict(backbone.forward_calls),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def _try(factory, notes: List[str]):
    try:
        return factory()
    except M.MetricUnavailable as exc:
        notes.append(str(exc).splitlines()[0])
        log.warning("%s", exc)
        return None


def cmd_evaluate(cfg: RunConfig, original: Optional[str] = None, pretrained: bool = True) -> int:
    mc = cfg.metrics
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    notes: List[str] = []
    if mc.frames is None and cfg.scene is None:
        raise ConfigError("evaluate needs a stylized scene (--scene) or a frame directory (--frames)")
    scene = load_scene(cfg.scene) if cfg.scene else None
    if scene is None and not Path(mc.frames).is_dir():
        raise ConfigError(f"frame directory not found: {mc.frames}")

    depths = cams = alphas = None
    if scene is not None:
        cams = camera_path(cfg, scene)
        rgb, depths, alphas = render_path(scene, cams, cfg.training.background)
    if mc.frames is not None:
        stylized = load_frames(mc.frames)
        if cams is not None and len(cams) != stylized.shape[0]:
            raise ConfigError(f"{stylized.shape[0]} frames but {len(cams)} path cameras")
    else:
        stylized = rgb
    size = tuple(stylized.shape[1:3])

    if mc.content_frames is not None:
        content = load_frames(mc.content_frames, size)
    elif original is not None:
        if cams is None:
            raise ConfigError("--original needs --scene or --cameras to define the camera path")
        content, _, _ = render_path(load_scene(original), cams, cfg.training.background)
    else:
        notes.append("no content frames given: content metrics compare the sequence with itself")
        content = stylized
    style = load_image(cfg.style) if cfg.style else None
    if style is None:
        notes.append("no style image: CLIP-S and S_vgg skipped")

    use = pretrained and mc.pretrained
    clip = _try(lambda: M.ClipImageEmbedder(mc.clip_model), notes) if use else None
    vgg = _try(M.VGGFeatures, notes) if use else None
    inception = _try(M.InceptionEmbedder, notes) if use else None
    perceptual = _try(M.PerceptualDistance, notes) if use else None
    if not use:
        notes.append("pretrained networks disabled: CLIP, S_vgg, FID and LPIPS skipped")

    report = M.evaluate_sequence(
        stylized, content, style, depths, cams, alphas,
        clip_embedder=clip, vgg_extractor=vgg if style is not None else None,
        fid_embedder=inception, perceptual=perceptual,
        short_range=mc.short_range, long_range=mc.long_range,
    )
    report.notes[:0] = notes
    if stylized.shape[0] < 2:
        log.warning("single frame: temporal metrics reported as null")
    for note in report.notes:
        log.info("note: %s", note)
    report.to_json(out / "metrics.json", extra={"frames": int(stylized.shape[0])})
    report.to_csv(out / "metrics.csv", label=Path(cfg.scene or mc.frames).stem)
    plotting.metrics_chart({Path(cfg.scene or mc.frames).stem: report.table_row()}, out / "metrics.png")
    print(json.dumps(report.table_row()))
    return EXIT_OK


def cmd_render(cfg: RunConfig, path_file: Optional[str] = None, n: Optional[int] = None) -> int:
    cfg.require("scene")
    rc = cfg.render
    out = Path(cfg.output)
    scene = load_scene(cfg.scene)
    cams = camera_path(cfg, scene, path_file, n)
    rgb, depth, alpha = render_path(scene, cams, cfg.training.background)
    save_frames(list(rgb), out / "frames")
    write_transforms_json(cams, out / "camera_path.json")
    stats = []
    for i, d in enumerate(depth):
        s = plotting.depth_heatmap(d, out / "depth" / f"depth_{i:04d}.png")
        np.save(out / "depth" / f"depth_{i:04d}.npy", d.numpy())
        stats.append({"frame": i, **s, "alpha_mean": float(alpha[i].mean())})
    (out / "depth_stats.json").write_text(json.dumps(stats, indent=2))
    if rc.gif:
        save_gif(list(rgb), out / "path.gif")
    if rc.debug_guidance and len(cams) >= 2:
        k = min(4, len(cams))
        guidance = build_guidance(cams[:k], list(depth[:k]), list(alpha[:k]))
        plotting.guidance_heatmaps(guidance, out / "guidance.png")
        np.savez_compressed(out / "guidance.npz", **guidance.to_numpy())
    print(json.dumps({"frames": len(cams), "output": str(out)}))
    return EXIT_OK


def cmd_make_toy(directory, gaussians: int, views: int, seed: int) -> int:
    from .toy import style_pattern, toy_cameras, toy_scene

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(toy_scene(gaussians, seed=seed), out / "scene.ply")
    write_transforms_json(toy_cameras(views), out / "transforms.json")
    save_image(style_pattern(64, "stripes"), out / "style.png")
    cfg = RunConfig(scene=str(out / "scene.ply"), cameras=str(out / "transforms.json"),
                    style=str(out / "style.png"), output=str(out / "run"))
    cfg.training.iterations = 200
    cfg.training.views_per_batch = 2
    cfg.training.lr_sh_dc = 0.05
    cfg.training.lr_sh_rest = 0.0025
    dump_config(cfg, out / "config.yaml")
    print(json.dumps({"config": str(out / "config.yaml")}))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    bad = [e for e in extra if not (e.startswith("--") and "=" in e and "." in e.split("=")[0])]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    try:
        if args.command == "make-toy":
            return cmd_make_toy(args.directory, args.gaussians, args.views, args.seed)
        cfg = resolve_config(args, extra)
        if args.command == "stylize":
            return cmd_stylize(cfg, args.resume)
        if args.command == "evaluate":
            if args.frames:
                cfg.metrics.frames = args.frames
            if args.content_frames:
                cfg.metrics.content_frames = args.content_frames
            if args.original and not Path(args.original).exists():
                raise ConfigError(f"original scene not found: {args.original}")
            if cfg.style and not Path(cfg.style).exists():
                raise ConfigError(f"style not found: {cfg.style}")
            return cmd_evaluate(cfg, args.original, pretrained=not args.no_pretrained)
        if args.command == "render":
            if args.gif:
                cfg.render.gif = True
            if args.debug_guidance:
                cfg.render.debug_guidance = True
            return cmd_render(cfg, args.camera_path, args.frames)
    except NumericalError as exc:
        _error("numerical failure", exc, exc.diagnostics)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, SceneFormatError, EmptySceneError, EmptyMaskError,
            BackboneUnavailable) as exc:
        _error(type(exc).__name__, exc)
        return EXIT_INPUT
    return EXIT_INPUT


def _error(kind: str, exc: Exception, details: Optional[dict] = None) -> None:
    payload = {"error": kind, "message": str(exc)}
    if details:
        payload["details"] = details
    print(json.dumps(payload), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
