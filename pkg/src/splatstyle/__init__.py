"""Color-only style transfer for pretrained 3D Gaussian splatting scenes."""

from .backbone import FeatureBackbone, TinyBackbone, create_backbone
from .cameras import CameraView, load_cameras
from .geometry import GeometryGuidance, build_guidance
from .renderer import SplatRenderer, render
from .scene import GaussianScene, load_scene, save_scene
from .trainer import Stylizer, TrainingConfig, run

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "FeatureBackbone",
    "GaussianScene",
    "GeometryGuidance",
    "SplatRenderer",
    "Stylizer",
    "TinyBackbone",
    "TrainingConfig",
    "build_guidance",
    "create_backbone",
    "load_cameras",
    "load_scene",
    "render",
    "run",
    "save_scene",
]
