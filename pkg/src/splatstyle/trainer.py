"""Color-only stylization loop for a pretrained Gaussian scene."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .attention import center_normalize, style_signal
from .backbone import FeatureBackbone, StyleBank, TimestepStrategy, timestep_schedule
from .cameras import CameraView
from .geometry import build_guidance
from .losses import LossReport, token_errors, total_loss
from .renderer import SplatRenderer, render_batch, stack_outputs
from .scene import FROZEN_FIELDS, GaussianScene, load_scene, partition_parameters, save_scene

log = logging.getLogger(__name__)

STYLE_SIGNALS = ("kv", "direct")
QUERY_SOURCES = ("content", "rendered")


class NumericalError(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, message: str, diagnostics: Dict[str, float]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainingConfig:
    iterations: int = 1000
    views_per_batch: int = 4
    timestep: str = "fixed:1"
    lam: float = 0.1
    style_weight: float = 1.0
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    seed: int = 0
    gga: bool = True
    geometry_mask: bool = True
    normalize: bool = True
    style_signal: str = "kv"
    style_query_source: str = "content"
    checkpoint_every: int = 0
    background: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        if self.views_per_batch < 1:
            raise ValueError("views_per_batch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.style_weight < 0:
            raise ValueError("style_weight must be >= 0")
        if self.style_signal not in STYLE_SIGNALS:
            raise ValueError(f"style_signal must be one of {STYLE_SIGNALS}")
        if self.style_query_source not in QUERY_SOURCES:
            raise ValueError(f"style_query_source must be one of {QUERY_SOURCES}")
        TimestepStrategy.parse(self.timestep)

    @property
    def timestep_strategy(self) -> TimestepStrategy:
        return TimestepStrategy.parse(self.timestep)


def sample_cameras(pool: Sequence[CameraView], n: int, rng: np.random.Generator) -> List[CameraView]:
    """Draw ``n`` cameras; without replacement when the pool is large enough.

    The returned order defines which views count as "previous" for the
    geometry-aware mask.
    """
    if len(pool) == 0:
        raise ValueError("camera pool is empty")
    idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
    return [pool[int(i)] for i in idx]


def frozen_geometry_unchanged(before: GaussianScene, after: GaussianScene) -> bool:
    return all(torch.equal(getattr(before, f).detach(), getattr(after, f).detach()) for f in FROZEN_FIELDS)


class Stylizer:
    """Holds the optimization state of one stylization run.

    Args:
        scene: scene to stylize; its color tensors are optimized in place.
        cameras: training camera pool (resized to the backbone resolution).
        style_image: (H, W, 3) style image in [0, 1] at backbone resolution.
        backbone: frozen feature backbone.
        config: training configuration.
        original: unmodified scene used to render content targets; defaults
            to a copy of ``scene``.
    """

    def __init__(
        self,
        scene: GaussianScene,
        cameras: Sequence[CameraView],
        style_image: torch.Tensor,
        backbone: FeatureBackbone,
        config: TrainingConfig,
        original: Optional[GaussianScene] = None,
        renderer: Optional[SplatRenderer] = None,
    ):
        self.config = config
        self.backbone = backbone
        h, w = backbone.resolution
        self.cameras = [c if (c.height, c.width) == (h, w) else c.resized(w, h) for c in cameras]
        if not self.cameras:
            raise ValueError("camera pool is empty")
        self.original = (original if original is not None else scene).clone()
        self.scene = scene
        self.partition = partition_parameters(scene)
        self.optimizer = torch.optim.Adam(
            [
                {"params": [scene.sh_dc], "lr": config.lr_sh_dc, "name": "sh_dc"},
                {"params": [scene.sh_rest], "lr": config.lr_sh_rest, "name": "sh_rest"},
            ],
            eps=1e-15,
        )
        self.renderer = renderer or SplatRenderer(background=config.background)
        self.style_image = style_image.to(backbone.device, backbone.dtype)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self._banks: Dict[int, StyleBank] = {}

    def style_bank(self, t: int) -> StyleBank:
        if t not in self._banks:
            self._banks[t] = self.backbone.build_style_bank(self.style_image, t)
        return self._banks[t]

    def next_batch(self):
        cams = sample_cameras(self.cameras, self.config.views_per_batch, self.rng)
        t = timestep_schedule(
            self.config.timestep_strategy,
            self.step + 1,
            max(self.config.iterations, 1),
            self.backbone.num_train_timesteps,
            self.rng,
        )
        return cams, t

    def compute_loss(self, cameras: Sequence[CameraView], t: int) -> LossReport:
        """Forward pass of one step (no optimizer update)."""
        cfg, bb = self.config, self.backbone
        dtype = bb.dtype

        rendered = render_batch(self.scene, cameras, self.renderer)
        rgb, _, _ = stack_outputs(rendered)
        with torch.no_grad():
            content = render_batch(self.original, cameras, self.renderer)
            rgb_c, depth_c, alpha_c = stack_outputs(content)
            guidance = build_guidance(cameras, list(depth_c), list(alpha_c))

            z_c = bb.encode(rgb_c.to(dtype))
            state_c = bb.extract_features(z_c, t)

        z = bb.encode(rgb.to(dtype))
        state = bb.extract_features(z, t, guidance if cfg.gga else None)
        bank = self.style_bank(t)

        norm = center_normalize if cfg.normalize else (lambda a: a)
        style_err, content_err, sizes = {}, {}, {}
        for name, cap in state.layers.items():
            cap_c = state_c[name]
            a_n = norm(cap.out)
            with torch.no_grad():
                a_c = norm(cap_c.out)
                if cfg.style_signal == "direct":
                    a_s = norm(bank.outputs[name]).expand_as(a_n)
                else:
                    q = cap_c.q if cfg.style_query_source == "content" else cap.q
                    a_s = style_signal(q, bank.keys[name], bank.values[name], cap.heads, normalize=cfg.normalize)
            style_err[name] = token_errors(a_n, a_s)
            content_err[name] = token_errors(a_n, a_c)
            sizes[name] = cap.size

        report = total_loss(
            style_err, content_err, guidance.mask if cfg.geometry_mask else None, cfg.lam, sizes, cfg.style_weight
        )
        if not torch.isfinite(report.total):
            diag = {f"norm/{n}": float(c.out.detach().norm()) for n, c in state.layers.items()}
            diag["mask_fill_rate"] = guidance.fill_rate()
            raise NumericalError(f"non-finite loss at step {self.step + 1}: {diag}", diag)
        return report

    def training_step(self, cameras: Optional[Sequence[CameraView]] = None, t: Optional[int] = None) -> LossReport:
        if cameras is None or t is None:
            sampled, sampled_t = self.next_batch()
            cameras = cameras if cameras is not None else sampled
            t = t if t is not None else sampled_t
        self.optimizer.zero_grad(set_to_none=True)
        report = self.compute_loss(cameras, t)
        report.total.backward()
        self.optimizer.step()
        self.step += 1
        return report

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "config": asdict(self.config),
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        original = directory / "original.ply"
        if not original.exists():
            save_scene(self.original, original)
        save_scene(self.scene, directory / f"ckpt_{self.step}.ply")
        path = directory / f"state_{self.step}.pt"
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def from_checkpoint(
        cls,
        directory,
        step: int,
        cameras: Sequence[CameraView],
        style_image: torch.Tensor,
        backbone: FeatureBackbone,
        config: Optional[TrainingConfig] = None,
    ) -> "Stylizer":
        directory = Path(directory)
        state = torch.load(directory / f"state_{step}.pt", weights_only=False)
        config = config or TrainingConfig(**state["config"])
        scene = load_scene(directory / f"ckpt_{step}.ply")
        original = load_scene(directory / "original.ply")
        stylizer = cls(scene, cameras, style_image, backbone, config, original=original)
        stylizer.load_state_dict(state)
        return stylizer


LOSS_COLUMNS = ("step", "timestep", "total", "style", "content", "lambda", "mask_fill_rate")


def run(
    scene: GaussianScene,
    cameras: Sequence[CameraView],
    style_image: torch.Tensor,
    config: TrainingConfig,
    backbone: FeatureBackbone,
    output_dir=None,
    stylizer: Optional[Stylizer] = None,
    callback: Optional[Callable[[int, LossReport], None]] = None,
):
    """Run the stylization loop up to ``config.iterations`` steps.

    Passing a ``stylizer`` (e.g. from :meth:`Stylizer.from_checkpoint`)
    resumes from its current step.

    Returns:
        The stylized scene and the list of per-step loss rows.
    """
    if stylizer is None:
        stylizer = Stylizer(scene, cameras, style_image, backbone, config)
    checksum = backbone.weights_checksum()
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log.info("stylization: %d iterations, seed %d, N=%d, t=%s", config.iterations, config.seed,
             config.views_per_batch, config.timestep)

    history: List[Dict[str, float]] = []
    csv_file = jsonl_file = None
    writer = None
    if out is not None:
        csv_file = open(out / "losses.csv", "a" if stylizer.step else "w", newline="")
        jsonl_file = open(out / "losses.jsonl", "a" if stylizer.step else "w")
    try:
        while stylizer.step < config.iterations:
            cams, t = stylizer.next_batch()
            report = stylizer.training_step(cams, t)
            row = {"step": stylizer.step, "timestep": t, **report.as_row()}
            history.append(row)
            log.info("step %d t=%d loss=%.6f style=%.6f content=%.6f fill=%.3f", stylizer.step, t,
                     row["total"], row["style"], row["content"], row["mask_fill_rate"])
            if csv_file is not None:
                if writer is None:
                    writer = csv.DictWriter(csv_file, fieldnames=list(LOSS_COLUMNS), extrasaction="ignore")
                    if stylizer.step == 1 or os.fstat(csv_file.fileno()).st_size == 0:
                        writer.writeheader()
                writer.writerow(row)
                jsonl_file.write(json.dumps(row) + "\n")
            if callback is not None:
                callback(stylizer.step, report)
            if out is not None and config.checkpoint_every and stylizer.step % config.checkpoint_every == 0:
                stylizer.save_checkpoint(out / "checkpoints")
    finally:
        if csv_file is not None:
            csv_file.close()
            jsonl_file.close()

    if not frozen_geometry_unchanged(stylizer.original, stylizer.scene):
        raise RuntimeError("geometry parameters changed during stylization")
    if backbone.weights_checksum() != checksum:
        raise RuntimeError("backbone weights changed during stylization")
    result = stylizer.scene
    if out is not None:
        save_scene(result, out / "stylized.ply")
    return result, history
