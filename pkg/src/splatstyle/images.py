"""Image and frame-sequence I/O."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image


def load_image(path, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Read an RGB image as an (H, W, 3) float32 tensor in [0, 1].

    ``size`` is (height, width); the image is resized with Lanczos filtering.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.LANCZOS)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)


def to_uint8(image: torch.Tensor | np.ndarray) -> np.ndarray:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def save_frames(frames: Sequence, directory, prefix: str = "frame") -> List[Path]:
    directory = Path(directory)
    return [save_image(f, directory / f"{prefix}_{i:04d}.png") for i, f in enumerate(frames)]


def load_frames(directory, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """All PNGs of a directory in name order, stacked to (T, H, W, 3)."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    return torch.stack([load_image(p, size) for p in paths])


def save_gif(frames: Sequence, path, fps: int = 10) -> Path:
    images = [Image.fromarray(to_uint8(f)) for f in frames]
    images[0].save(path, save_all=True, append_images=images[1:], duration=int(1000 / fps), loop=0)
    return Path(path)
