"""Stable Diffusion (diffusers) backbone with hooked UNet self-attention."""

from __future__ import annotations

import logging
import os
from typing import Optional, Tuple

import torch

from .base import AttendFn, FeatureBackbone

log = logging.getLogger(__name__)

DEFAULT_MODEL = "runwayml/stable-diffusion-v1-5"
CACHE_ENV = "SPLATSTYLE_WEIGHTS_DIR"


class BackboneUnavailable(RuntimeError):
    """Pretrained weights could not be loaded."""


class _HookedSelfAttention:
    """Drop-in attention processor that hands q/k/v to the backbone.

    Mirrors the default scaled-dot-product processor for self-attention
    blocks without spatial norm or custom masks.
    """

    def __init__(self, name: str, owner: "DiffusersBackbone"):
        self.name = name
        self.owner = owner

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, *args, **kwargs):
        if encoder_hidden_states is not None:
            raise RuntimeError(f"{self.name} received encoder states; only self-attention is hooked")
        residual = hidden_states
        if getattr(attn, "spatial_norm", None) is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        ndim = hidden_states.ndim
        if ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if getattr(attn, "group_norm", None) is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        q = attn.to_q(hidden_states)
        k = attn.to_k(hidden_states)
        v = attn.to_v(hidden_states)
        out = self.owner._attend(self.name, q, k, v, attn.heads)

        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class DiffusersBackbone(FeatureBackbone):
    """VAE encoder plus conditional UNet; every ``attn1`` block is a site.

    Args:
        vae: ``AutoencoderKL``.
        unet: ``UNet2DConditionModel``.
        prompt_embeds: (1, L, D) text conditioning (empty prompt).
        resolution: image (height, width), multiple of the VAE factor.
        scaling_factor: latent scale; defaults to ``vae.config.scaling_factor``.
    """

    latent_channels = 4

    def __init__(self, vae, unet, prompt_embeds: torch.Tensor, resolution: Tuple[int, int] = (512, 512),
                 scaling_factor: Optional[float] = None):
        super().__init__()
        self.vae = vae
        self.unet = unet
        self.resolution = tuple(resolution)
        self.scaling_factor = float(scaling_factor if scaling_factor is not None else vae.config.scaling_factor)
        self.num_train_timesteps = 1000
        self.prompt_embeds = prompt_embeds.detach()
        self._attend: Optional[AttendFn] = None

        processors = {}
        for key, proc in unet.attn_processors.items():
            name = key[: -len(".processor")]
            processors[key] = _HookedSelfAttention(name, self) if name.endswith("attn1") else proc
        unet.set_attn_processor(processors)
        self.freeze()
        self._sites = self._discover_sites()

    @classmethod
    def from_pretrained(
        cls,
        model_id: str = DEFAULT_MODEL,
        resolution: int | Tuple[int, int] = 512,
        dtype: torch.dtype | str = torch.float32,
        device: str = "cpu",
        cache_dir: Optional[str] = None,
    ) -> "DiffusersBackbone":
        if isinstance(dtype, str):
            dtype = getattr(torch, dtype)
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer

            kw = dict(cache_dir=cache_dir, torch_dtype=dtype)
            vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae", **kw)
            unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet", **kw)
            tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer", cache_dir=cache_dir)
            text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder", **kw)
        except Exception as exc:
            raise BackboneUnavailable(f"cannot load '{model_id}': {exc}") from exc
        tokens = tokenizer([""], padding="max_length", max_length=tokenizer.model_max_length, return_tensors="pt")
        with torch.no_grad():
            embeds = text_encoder(tokens.input_ids)[0]
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        backbone = cls(vae, unet, embeds, resolution)
        return backbone.to(device)

    @property
    def sites(self):
        return self._sites

    def modules(self):
        return (self.unet, self.vae)

    def to(self, *args, **kwargs):
        super().to(*args, **kwargs)
        self.prompt_embeds = self.prompt_embeds.to(*args, **kwargs)
        return self

    def _encode(self, x):
        return self.vae.encode(x).latent_dist.mean * self.scaling_factor

    def _denoise(self, z, t, attend):
        cond = self.prompt_embeds.to(z.dtype).expand(z.shape[0], -1, -1)
        self._attend = attend
        try:
            return self.unet(z, torch.tensor(t, device=z.device), encoder_hidden_states=cond).sample
        finally:
            self._attend = None
