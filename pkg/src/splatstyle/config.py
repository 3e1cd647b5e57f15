"""Run configuration: one YAML/JSON file plus dotted command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .trainer import TrainingConfig


class ConfigError(ValueError):
    """Invalid configuration or missing input file."""


@dataclass
class BackboneConfig:
    kind: str = "tiny"  # tiny | sd15
    model_id: str = "runwayml/stable-diffusion-v1-5"
    resolution: int = 32
    seed: int = 0
    dtype: str = "float32"
    device: str = "cpu"

    def __post_init__(self):
        if self.kind not in ("tiny", "sd15", "diffusers"):
            raise ConfigError(f"backbone.kind must be 'tiny' or 'sd15', got '{self.kind}'")


@dataclass
class MetricsConfig:
    short_range: int = 1
    long_range: int = 7
    frames: Optional[str] = None  # directory of stylized PNGs
    content_frames: Optional[str] = None
    clip_model: str = "openai/clip-vit-base-patch32"
    pretrained: bool = True  # try to load CLIP / VGG19 / Inception weights


@dataclass
class RenderConfig:
    camera_path: Optional[str] = None  # defaults to the camera source, else an orbit
    frames: int = 24
    width: Optional[int] = None
    height: Optional[int] = None
    fov_deg: float = 50.0
    gif: bool = False
    debug_guidance: bool = False
    previews: int = 4


@dataclass
class RunConfig:
    scene: Optional[str] = None
    cameras: Optional[str] = None
    style: Optional[str] = None
    output: str = "outputs"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def require(self, *names: str) -> None:
        """Check that the named path fields are set and exist."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"'{name}' is required for this command")
            if not Path(value).exists():
                raise ConfigError(f"{name} not found: {value}")


SECTIONS = {"training": TrainingConfig, "backbone": BackboneConfig, "metrics": MetricsConfig, "render": RenderConfig}


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix or 'root'}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS and cls is RunConfig:
            kwargs[key] = _build(SECTIONS[key], value or {}, f"{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'}: {exc}") from exc


def from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data)


def load_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return data or {}


def parse_value(text: str) -> Any:
    """YAML scalar parsing so ``0.1``, ``true``, ``[1, 2]`` get their types."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key.subkey=value`` overrides to a nested dict (copied)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.lstrip("-").partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' must look like --key.subkey=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a section")
        node[parts[-1]] = parse_value(raw)
    return data


ABLATIONS = {
    "no-gga": {"gga": False},
    "no-mg": {"geometry_mask": False},
    "no-norm": {"normalize": False},
    "direct-style": {"style_signal": "direct"},
}


def apply_ablations(data: Dict[str, Any], ablations: List[str]) -> Dict[str, Any]:
    training = data.setdefault("training", {})
    for name in ablations:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{name}'")
        training.update(ABLATIONS[name])
    return data


def dump_config(config: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(asdict(config), fh, sort_keys=False)
