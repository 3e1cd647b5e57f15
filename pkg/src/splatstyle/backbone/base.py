from __future__ import annotations

import abc
import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
import torch

from ..attention import geometry_guided_attention
from ..geometry import GeometryGuidance

# attend(site_name, q, k, v, heads) -> attention output (B, T, d)
AttendFn = Callable[[str, torch.Tensor, torch.Tensor, torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class AttentionSite:
    name: str
    height: int
    width: int
    dim: int
    heads: int

    @property
    def tokens(self) -> int:
        return self.height * self.width


@dataclass
class LayerCapture:
    """Q/K/V (pre head split) and attention output of one site, all (N, T, d)."""

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    out: torch.Tensor
    size: Tuple[int, int]
    heads: int


@dataclass
class AttentionState:
    layers: Dict[str, LayerCapture]
    timestep: int

    def __getitem__(self, name: str) -> LayerCapture:
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class StyleBank:
    """Per-site keys, values and attention outputs of the style image."""

    keys: Mapping[str, torch.Tensor]
    values: Mapping[str, torch.Tensor]
    outputs: Mapping[str, torch.Tensor]
    timestep: int

    @property
    def layer_names(self) -> List[str]:
        return list(self.keys)

    def __len__(self):
        return len(self.keys)


@dataclass(frozen=True)
class TimestepStrategy:
    kind: str = "fixed"
    value: int = 1

    @classmethod
    def parse(cls, text: str) -> "TimestepStrategy":
        """Parse ``fixed:T``, ``fixed`` (t=1), ``random`` or ``decreasing``."""
        text = str(text).strip().lower()
        if text.startswith("fixed"):
            _, _, val = text.partition(":")
            return cls("fixed", int(val) if val else 1)
        if text in ("random", "decreasing"):
            return cls(text, 0)
        raise ValueError(f"unknown timestep strategy '{text}'")

    def __str__(self):
        return f"fixed:{self.value}" if self.kind == "fixed" else self.kind


def timestep_schedule(
    strategy: TimestepStrategy | str,
    step: int,
    total: int,
    num_train_timesteps: int = 1000,
    rng: np.random.Generator | None = None,
) -> int:
    """Timestep for optimization step ``step`` of ``total``."""
    if isinstance(strategy, str):
        strategy = TimestepStrategy.parse(strategy)
    big_t = num_train_timesteps
    if strategy.kind == "fixed":
        return int(strategy.value)
    if strategy.kind == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.integers(1, big_t + 1))
    if strategy.kind == "decreasing":
        return max(1, int(round(big_t * (1.0 - step / max(total, 1)))))
    raise ValueError(f"unknown timestep strategy '{strategy.kind}'")


class FeatureBackbone(abc.ABC):
    """Frozen latent encoder plus denoiser whose self-attention sites are hooked.

    Subclasses implement :meth:`_encode` (images in [-1, 1], NCHW) and
    :meth:`_denoise`, which must route every self-attention computation
    through the supplied ``attend`` callback.
    """

    resolution: Tuple[int, int]
    num_train_timesteps: int = 1000

    def __init__(self):
        self.forward_calls: Counter = Counter()

    @property
    @abc.abstractmethod
    def sites(self) -> Sequence[AttentionSite]: ...

    @abc.abstractmethod
    def modules(self) -> Sequence[torch.nn.Module]: ...

    @abc.abstractmethod
    def _encode(self, x: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _denoise(self, z: torch.Tensor, t: int, attend: AttendFn) -> torch.Tensor: ...

    @property
    def dtype(self) -> torch.dtype:
        return next(self.modules()[0].parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.modules()[0].parameters()).device

    def to(self, *args, **kwargs):
        for m in self.modules():
            m.to(*args, **kwargs)
        return self

    def freeze(self):
        for m in self.modules():
            m.eval()
            m.requires_grad_(False)
        return self

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for m in self.modules():
            for name, p in sorted(m.state_dict().items()):
                digest.update(name.encode())
                digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def _discover_sites(self) -> Tuple[AttentionSite, ...]:
        """Probe forward recording every self-attention call in order."""
        h, w = self.resolution
        found = []

        def probe(name, q, k, v, heads):
            found.append((name, q.shape[1], q.shape[2], heads))
            return torch.zeros_like(v)

        with torch.no_grad():
            x = torch.zeros(1, 3, h, w, dtype=self.dtype, device=self.device)
            z = self._encode(x)
            self._denoise(z, 1, probe)
        lat_h, lat_w = z.shape[-2:]
        sites = []
        for name, tokens, dim, heads in found:
            scale = math.sqrt(lat_h * lat_w / tokens)
            sh, sw = int(round(lat_h / scale)), int(round(lat_w / scale))
            if sh * sw != tokens:
                raise RuntimeError(f"cannot infer the token grid of site {name} ({tokens} tokens)")
            sites.append(AttentionSite(name, sh, sw, dim, heads))
        if len({s.name for s in sites}) != len(sites):
            raise RuntimeError("attention site visited twice in one forward")
        return tuple(sites)

    def site(self, name: str) -> AttentionSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Encode (N, H, W, 3) images in [0, 1] to latents (N, C, h, w)."""
        if images.dim() == 3:
            images = images[None]
        if tuple(images.shape[1:3]) != tuple(self.resolution) or images.shape[-1] != 3:
            raise ValueError(
                f"expected images of shape (N, {self.resolution[0]}, {self.resolution[1]}, 3), "
                f"got {tuple(images.shape)}"
            )
        self.forward_calls["encode"] += 1
        x = images.permute(0, 3, 1, 2).to(self.device, self.dtype) * 2.0 - 1.0
        return self._encode(x)

    def extract_features(
        self, z: torch.Tensor, t: int, guidance: GeometryGuidance | None = None
    ) -> AttentionState:
        """One denoiser forward capturing every self-attention site.

        With ``guidance`` the self-attention of each site is replaced by the
        geometry-guided variant for the whole batch. No noise is added to
        ``z``.
        """
        if not 1 <= int(t) <= self.num_train_timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.num_train_timesteps}]")
        if guidance is not None:
            if guidance.n_views != z.shape[0]:
                raise ValueError(f"guidance has {guidance.n_views} views, latents have {z.shape[0]}")
            if tuple(guidance.size) != tuple(self.resolution):
                raise ValueError(f"guidance resolution {guidance.size} != backbone resolution {self.resolution}")
        self.forward_calls["gga" if guidance is not None else "plain"] += 1

        sites = {s.name: s for s in self.sites}
        captures: Dict[str, LayerCapture] = {}

        def attend(name, q, k, v, heads):
            site = sites[name]
            if q.shape[1] != site.tokens:
                raise ValueError(f"site {name}: {q.shape[1]} tokens, expected {site.tokens}")
            g = guidance.at_resolution(site.height, site.width) if guidance is not None else None
            out = geometry_guided_attention(q, k, v, g, heads=heads)
            captures[name] = LayerCapture(q, k, v, out, (site.height, site.width), heads)
            return out

        self._denoise(z, int(t), attend)
        missing = set(sites) - set(captures)
        if missing:
            raise RuntimeError(f"attention sites not reached during forward: {sorted(missing)}")
        return AttentionState({s.name: captures[s.name] for s in self.sites}, int(t))

    def build_style_bank(self, style_image: torch.Tensor, t: int = 1) -> StyleBank:
        """Cache the style image's per-site keys, values and attention outputs."""
        with torch.no_grad():
            z = self.encode(style_image.to(self.dtype))
            state = self.extract_features(z, t)
        keys = {n: c.k[:1].detach().clone() for n, c in state.layers.items()}
        values = {n: c.v[:1].detach().clone() for n, c in state.layers.items()}
        outputs = {n: c.out[:1].detach().clone() for n, c in state.layers.items()}
        return StyleBank(MappingProxyType(keys), MappingProxyType(values), MappingProxyType(outputs), int(t))
