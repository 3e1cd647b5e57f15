"""Small randomly initialized latent-diffusion stand-in for CPU tests.

It keeps the production contract (8x latent reduction, 4 latent channels,
timestep-conditioned denoiser with multi-head self-attention sites) at a
size where a full optimization step takes milliseconds.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import AttendFn, FeatureBackbone


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SelfAttentionBlock(nn.Module):
    def __init__(self, name: str, dim: int, heads: int):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(4, dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, attend: AttendFn) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (N, h*w, C), row-major
        out = attend(self.name, self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads)
        return x + self.to_out(out).transpose(1, 2).reshape(n, c, h, w)


class TinyEncoder(nn.Module):
    def __init__(self, latent_channels: int = 4, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, latent_channels, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class TinyDenoiser(nn.Module):
    def __init__(self, latent_channels: int = 4, dim: int = 16, heads: int = 2):
        super().__init__()
        self.dim = dim
        self.conv_in = nn.Conv2d(latent_channels, dim, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.res = nn.Conv2d(dim, dim, 3, padding=1)
        self.attn_down = SelfAttentionBlock("down.attn", dim, heads)
        self.down = nn.Conv2d(dim, dim, 3, stride=2, padding=1)
        self.attn_mid = SelfAttentionBlock("mid.attn", dim, heads)
        self.up = nn.Conv2d(2 * dim, dim, 3, padding=1)
        self.conv_out = nn.Conv2d(dim, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: int, attend: AttendFn) -> torch.Tensor:
        temb = timestep_embedding(torch.full((z.shape[0],), float(t)), self.dim).to(z.dtype)
        h = self.conv_in(z) + self.time_mlp(temb)[:, :, None, None]
        h = h + F.silu(self.res(h))
        skip = self.attn_down(h, attend)
        h = F.silu(self.down(skip))
        h = self.attn_mid(h, attend)
        h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
        h = F.silu(self.up(torch.cat([h, skip], dim=1)))
        return self.conv_out(h)


class TinyBackbone(FeatureBackbone):
    """Seeded toy backbone: 32x32 images, 4x4x4 latents, two attention sites
    (4x4 and 2x2 tokens) of width 16 with 2 heads."""

    latent_channels = 4
    downsample = 8

    def __init__(
        self,
        seed: int = 0,
        resolution: int = 32,
        dim: int = 16,
        heads: int = 2,
        qk_gain: float = 2.0,
        dtype=torch.float32,
    ):
        super().__init__()
        if resolution % (2 * self.downsample):
            raise ValueError("resolution must be a multiple of 16")
        self.resolution = (resolution, resolution)
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = TinyEncoder(self.latent_channels)
            self.denoiser = TinyDenoiser(self.latent_channels, dim, heads)
            self._init_weights(qk_gain)
        self.to(dtype)
        self.freeze()
        self._sites = self._discover_sites()

    @torch.no_grad()
    def _init_weights(self, qk_gain: float):
        # variance-preserving init so image content, not biases or the
        # timestep embedding, dominates the attention features
        for m in (*self.encoder.modules(), *self.denoiser.modules()):
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
                if m.bias is not None:
                    m.bias.zero_()
        self.denoiser.time_mlp[2].weight.mul_(0.1)
        for blk in (self.denoiser.attn_down, self.denoiser.attn_mid):
            blk.to_q.weight.mul_(qk_gain)
            blk.to_k.weight.mul_(qk_gain)

    @property
    def sites(self):
        return self._sites

    def modules(self):
        return (self.encoder, self.denoiser)

    def _encode(self, x):
        return self.encoder(x)

    def _denoise(self, z, t, attend):
        return self.denoiser(z, t, attend)
