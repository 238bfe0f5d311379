"""Desk-scale retrieval model wiring projectors, resampler, composer and pooling."""
from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from ..resampler import CrossAttentionBlock, SharedMediaResampler
from ..swpool import ASWPool
from ..tensor_core import ShapeError


def projector(d_in: int, d_out: int) -> nn.Sequential:
    """Two-layer GELU MLP, the LLaVA-style media projector."""
    return nn.Sequential(nn.Linear(d_in, d_out), nn.GELU(), nn.Linear(d_out, d_out))


def mean_pool_baseline(hidden_states: torch.Tensor) -> torch.Tensor:
    if hidden_states.shape[-2] < 1:
        raise ShapeError("need at least one hidden state")
    return hidden_states.mean(dim=-2)


class MeanPool(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.out_dim = dim

    def forward(self, hidden_states):
        return mean_pool_baseline(hidden_states)


class ToyComposer(nn.Module):
    """One self-attention block over [set_1 + slot_1, ..., set_k + slot_k, marker].

    Stands in for the frozen LLM: it sees every token set at once and
    contextualizes them; the slot embeddings make set order matter.
    """

    def __init__(self, dim: int, heads: int, max_sets: int = 3, num_markers: int = 1):
        super().__init__()
        self.slots = nn.Parameter(0.02 * torch.randn(max_sets, dim))
        self.markers = nn.Parameter(0.02 * torch.randn(num_markers, dim))
        self.block = CrossAttentionBlock(dim, heads)

    def forward(self, resampled_sets: Sequence[torch.Tensor], query_marker: torch.Tensor) -> torch.Tensor:
        if not resampled_sets:
            raise ShapeError("composer needs at least one token set")
        if len(resampled_sets) > self.slots.shape[0]:
            raise ShapeError(f"{len(resampled_sets)} sets exceed {self.slots.shape[0]} slots")
        lead = resampled_sets[0].shape[:-2]
        dim = self.slots.shape[1]
        parts = []
        for i, s in enumerate(resampled_sets):
            if s.shape[:-2] != lead or s.shape[-1] != dim:
                raise ShapeError(f"token set {i} has shape {tuple(s.shape)}")
            parts.append(s + self.slots[i])
        marker = query_marker if query_marker.dim() == 3 else query_marker.reshape(1, dim)
        parts.append(marker.expand(*lead, 1, dim))
        x = torch.cat(parts, dim=-2)
        return self.block(x, x)


def toy_composer(composer: ToyComposer, resampled_sets, query_marker):
    return composer(resampled_sets, query_marker)


class RetrievalModel(nn.Module):
    """Maps media items (plus an optional edit vector) to retrieval embeddings.

    Marker ``i < len(tasks)`` is task i's instruction stand-in; the last
    marker is used for raw candidates.
    """

    def __init__(
        self,
        d_enc: int,
        dim: int,
        heads: int,
        num_latents: int,
        num_refs: int,
        num_slices: int,
        num_tasks: int,
        modalities: Sequence[str] = ("image", "audio", "video"),
        video_grid: tuple[int, int, int] = (4, 2, 2),
        max_frames: int = 32,
        pooling: str = "aswp",
        modality_latents: bool = True,
    ):
        super().__init__()
        self.projectors = nn.ModuleDict(
            {"visual": projector(d_enc, dim), "audio": projector(d_enc, dim), "text": projector(d_enc, dim)}
        )
        self.resampler = SharedMediaResampler(
            dim,
            num_latents,
            heads,
            modalities,
            max_frames=max_frames,
            video_grid=video_grid,
            use_modality_latents=modality_latents,
        )
        self.composer = ToyComposer(dim, heads, max_sets=2, num_markers=num_tasks + 1)
        if pooling == "aswp":
            self.pool = ASWPool(dim, num_refs, num_slices, heads)
        elif pooling == "mean":
            self.pool = MeanPool(dim)
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
        self.num_tasks = num_tasks

    # parameter groups trained per stage
    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {"projectors": [], "resampler": [], "pool": [], "composer": []}
        for name, p in self.named_parameters():
            out[name.split(".", 1)[0]].append((name, p))
        return out

    def renormalize(self) -> None:
        if isinstance(self.pool, ASWPool):
            pool = self.pool.pool
            with torch.no_grad():
                norms = pool.slicers.norm(dim=-1, keepdim=True)
                tol = 16 * torch.finfo(pool.slicers.dtype).eps
                off = (norms - 1).abs() > tol
                if off.any():
                    pool.slicers.copy_(torch.where(off, pool.slicers / norms, pool.slicers))

    def media(self, modality: str, tokens: torch.Tensor) -> torch.Tensor:
        """Encoder tokens (n, M, d_enc) or video (n, T, H, W, d_enc) -> (n, N, D)."""
        proj = self.projectors["audio" if modality == "audio" else "visual"]
        x = proj(tokens)
        if modality == "video":
            x = self.resampler.video_tokens(x)
        return self.resampler(x, modality)

    def embed(
        self,
        modality: str,
        tokens: torch.Tensor,
        marker,
        modification: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (embeddings (n, L), resampled media tokens (n, N, D)).

        ``marker`` is one marker index or a per-row index tensor.
        """
        resampled = self.media(modality, tokens)
        return self.compose_and_pool(resampled, marker, modification), resampled

    def compose_and_pool(self, resampled, marker, modification=None) -> torch.Tensor:
        sets = [resampled]
        if modification is not None:
            sets.append(self.projectors["text"](modification)[:, None, :])
        markers = self.composer.markers[torch.as_tensor(marker)]
        if markers.dim() == 2:
            markers = markers[:, None, :]
        states = self.composer(sets, markers)
        return self.pool(states)

    @property
    def candidate_marker(self) -> int:
        return self.num_tasks
