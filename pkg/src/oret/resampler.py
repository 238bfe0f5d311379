"""Shared media resampler and video preprocessing.

Learned latent queries attend over a variable number of media tokens
through two pre-norm cross-attention blocks, so every media item comes out
as a fixed N x D token set. Each modality owns an additive latent bank on
top of the shared one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import ShapeError


class ConfigError(ValueError):
    pass


class CrossAttentionBlock(nn.Module):
    """Pre-norm multi-head cross-attention plus a 4x GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_mult: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads={heads} does not divide dim={dim}")
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_mult * dim),
            nn.GELU(),
            nn.Linear(mlp_mult * dim, dim),
        )

    def _split(self, x):
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-2, -3)

    def attend(self, latents: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        q = self._split(self.to_q(self.norm_q(latents)))
        kv_in = self.norm_kv(inputs)
        k = self._split(self.to_k(kv_in))
        v = self._split(self.to_v(kv_in))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(-2, -3).reshape(latents.shape)
        return self.to_out(out)

    def forward(self, latents: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        if latents.shape[-1] != inputs.shape[-1]:
            raise ShapeError(f"latent dim {latents.shape[-1]} != input dim {inputs.shape[-1]}")
        if inputs.shape[-2] < 1:
            raise ShapeError("cross-attention needs at least one input token")
        x = latents + self.attend(latents, inputs)
        return x + self.mlp(self.norm_mlp(x))


class LatentResampler(nn.Module):
    """N learned queries (+ optional per-modality offsets) through two cross-attention blocks."""

    def __init__(
        self,
        dim: int,
        num_latents: int,
        heads: int,
        modalities: Sequence[str] = (),
        num_blocks: int = 2,
        use_modality_latents: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.dim = dim
        self.num_latents = num_latents
        self.use_modality_latents = use_modality_latents
        self.shared_latents = nn.Parameter(
            0.02 * torch.randn(num_latents, dim, generator=generator)
        )
        self.modality_latents = nn.ParameterDict(
            {m: nn.Parameter(torch.zeros(num_latents, dim)) for m in modalities}
        )
        self.blocks = nn.ModuleList(CrossAttentionBlock(dim, heads) for _ in range(num_blocks))

    def initial_latents(self, modality: Optional[str]) -> torch.Tensor:
        if modality is None:
            return self.shared_latents
        if modality not in self.modality_latents:
            raise ConfigError(f"unknown modality {modality!r}")
        if not self.use_modality_latents:
            return self.shared_latents
        return self.shared_latents + self.modality_latents[modality]

    def forward(self, tokens: torch.Tensor, modality: Optional[str] = None) -> torch.Tensor:
        x = self.initial_latents(modality).expand(*tokens.shape[:-2], -1, -1)
        for block in self.blocks:
            x = block(x, tokens)
        return x


def sinusoidal_frame_embeddings(t_max: int, dim: int) -> torch.Tensor:
    if dim % 2:
        raise ConfigError(f"frame embedding dim must be even, got {dim}")
    t = torch.arange(t_max, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    out = torch.empty(t_max, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(t / freq)
    out[:, 1::2] = torch.cos(t / freq)
    return out


def video_trilinear(features: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Align-corners trilinear resize of (..., T, H, W, D) to the target grid."""
    target = tuple(int(s) for s in target)
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"bad target grid {target}")
    if features.dim() < 4:
        raise ShapeError("expected (..., T, H, W, D)")
    src = tuple(features.shape[-4:-1])
    if src == target:
        return features.clone()
    lead = features.shape[:-4]
    d = features.shape[-1]
    x = features.reshape(-1, *src, d).permute(0, 4, 1, 2, 3)
    y = F.interpolate(x, size=target, mode="trilinear", align_corners=True)
    return y.permute(0, 2, 3, 4, 1).reshape(*lead, *target, d)


@dataclass
class MediaTokens:
    modality: str
    tokens: torch.Tensor  # (M, D) or, for video, (T, H, W, D)
    grid: Optional[tuple[int, int, int]] = None


class SharedMediaResampler(LatentResampler):
    """Latent resampler shared across media types, with learnable frame embeddings."""

    def __init__(
        self,
        dim: int,
        num_latents: int,
        heads: int,
        modalities: Sequence[str] = ("image", "video", "audio"),
        max_frames: int = 32,
        video_grid: tuple[int, int, int] = (4, 2, 2),
        use_modality_latents: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__(
            dim,
            num_latents,
            heads,
            modalities,
            use_modality_latents=use_modality_latents,
            generator=generator,
        )
        self.video_grid = tuple(video_grid)
        self.frame_embeddings = nn.Parameter(
            sinusoidal_frame_embeddings(max_frames, dim).to(torch.get_default_dtype())
        )

    def video_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """(..., T, H, W, D) -> (..., T'H'W', D): frame embeddings, resize, t-major flatten."""
        t = grid.shape[-4]
        if t > self.frame_embeddings.shape[0]:
            raise ShapeError(f"{t} frames exceed the {self.frame_embeddings.shape[0]}-frame bank")
        x = grid + self.frame_embeddings[:t, None, None, :]
        x = video_trilinear(x, self.video_grid)
        return x.reshape(*x.shape[:-4], -1, x.shape[-1])

    def resample(self, media: MediaTokens) -> torch.Tensor:
        tokens = media.tokens
        if media.modality == "video" and tokens.dim() >= 4 and media.grid is not None:
            tokens = self.video_tokens(tokens)
        return self(tokens, media.modality)

    @torch.no_grad()
    def copy_modality_latents(self, src: str, dst: str) -> None:
        self.modality_latents[dst].copy_(self.modality_latents[src])
