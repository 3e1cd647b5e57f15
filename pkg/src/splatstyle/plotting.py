"""Report figures: loss curves, preview grids, guidance and depth heatmaps."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}


def _np(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(history: Sequence[Mapping[str, float]], path, smooth: int = 0) -> Path:
    """Total, style and content loss against step (log scale)."""
    steps = np.array([row["step"] for row in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key, color in (("total", "k"), ("style", "tab:red"), ("content", "tab:blue")):
            vals = np.array([row[key] for row in history], dtype=float)
            if smooth > 1 and len(vals) >= smooth:
                kernel = np.ones(smooth) / smooth
                ax.plot(steps, vals, color=color, alpha=0.25, lw=0.8)
                ax.plot(steps[smooth - 1:], np.convolve(vals, kernel, mode="valid"), color=color, label=key)
            else:
                ax.plot(steps, vals, color=color, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def preview_grid(rows: Mapping[str, Sequence], path, style_image=None) -> Path:
    """Image grid: one row per label (e.g. content / stylized), optional style tile."""
    labels = list(rows)
    ncols = max(len(v) for v in rows.values()) + (1 if style_image is not None else 0)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(labels), ncols, figsize=(1.6 * ncols, 1.6 * len(labels)), squeeze=False)
        for r, label in enumerate(labels):
            for c in range(ncols):
                axes[r, c].axis("off")
            for c, img in enumerate(rows[label]):
                axes[r, c].imshow(np.clip(_np(img), 0, 1))
            axes[r, 0].set_title(label, loc="left")
        if style_image is not None:
            axes[0, -1].imshow(np.clip(_np(style_image), 0, 1))
            axes[0, -1].set_title("style")
        return _save(fig, path)


def guidance_heatmaps(guidance, path) -> Path:
    """Per-view geometry-aware mask, pairwise visibility and warped x-coordinate."""
    n = guidance.n_views
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 2 * n + 1, figsize=(1.5 * (2 * n + 1), 1.5 * n), squeeze=False)
        for b in range(n):
            axes[b, 0].imshow(_np(guidance.mask[b]), cmap="gray", vmin=0, vmax=1)
            axes[b, 0].set_title(f"M_G[{b}]")
            for j in range(n):
                ax_v, ax_g = axes[b, 1 + j], axes[b, 1 + n + j]
                ax_v.set_title(f"v {b}<-{j}")
                ax_g.set_title(f"g_x {b}<-{j}")
                if (b, j) in guidance.visibility:
                    ax_v.imshow(_np(guidance.visibility[(b, j)]), cmap="gray", vmin=0, vmax=1)
                    ax_g.imshow(_np(guidance.grids[(b, j)][..., 0]), cmap="coolwarm", vmin=-1, vmax=1)
        for ax in axes.flat:
            ax.axis("off")
        return _save(fig, path)


def depth_heatmap(depth, path, title: Optional[str] = None) -> Dict[str, float]:
    """Save a depth heatmap; returns the min/max used for the color scale."""
    d = _np(depth).astype(np.float64)
    hit = d > 0
    lo = float(d[hit].min()) if hit.any() else 0.0
    hi = float(d[hit].max()) if hit.any() else 0.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3, 3))
        im = ax.imshow(np.where(hit, d, np.nan), cmap="viridis", vmin=lo, vmax=hi if hi > lo else lo + 1e-6)
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(title or f"depth [{lo:.3g}, {hi:.3g}]")
        ax.axis("off")
        _save(fig, path)
    return {"min": lo, "max": hi}


def metrics_chart(rows: Mapping[str, Mapping[str, Optional[float]]], path) -> Path:
    """Bar chart of each metric column, one bar per labeled run."""
    labels = list(rows)
    columns = [c for c in next(iter(rows.values())) if any(rows[l].get(c) is not None for l in labels)]
    if not columns:
        columns = list(next(iter(rows.values())))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(columns), figsize=(1.6 * len(columns), 2.4), squeeze=False)
        for ax, col in zip(axes[0], columns):
            vals = [rows[l].get(col) for l in labels]
            ax.bar(range(len(labels)), [np.nan if v is None else v for v in vals], color="tab:gray")
            ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
            ax.set_title(col)
        fig.tight_layout()
        return _save(fig, path)


def image_strip(frames: List, path) -> Path:
    return preview_grid({"frames": frames}, path)
