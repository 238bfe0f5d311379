"""Attention sliced Wasserstein pooling.

A set of S latent tokens is projected onto L unit directions. On every
direction the projected tokens are matched to learned scalar references
by sorting both sides (the 1D optimal transport plan), giving an S x L
slice embedding. A straight-through maximum then picks one entry per
column, producing an L-dimensional vector.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .tensor_core import ShapeError, note_discrete as _note


def slice_project(tokens: torch.Tensor, slicer: torch.Tensor) -> torch.Tensor:
    if tokens.shape[-1] != slicer.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[-1]} != slicer dim {slicer.shape[0]}")
    return tokens @ slicer


def monge_coupling_1d(sliced_tokens: torch.Tensor, sliced_refs: torch.Tensor) -> torch.Tensor:
    """Sort-matched differences, reported at each reference's original slot."""
    if sliced_tokens.shape[-1] != sliced_refs.shape[-1]:
        raise ShapeError("token and reference slices differ in length")
    z_sorted = torch.sort(sliced_tokens, dim=-1, stable=True).values
    rank_x = torch.argsort(torch.argsort(sliced_refs, dim=-1, stable=True), dim=-1, stable=True)
    return torch.gather(z_sorted, -1, rank_x.expand_as(z_sorted)) - sliced_refs


def brute_force_w2(sliced_tokens, sliced_refs) -> tuple[float, tuple[int, ...]]:
    """Exhaustive minimum of sum_i (tokens[sigma(i)] - refs[i])**2 over permutations.

    Plain numpy so it shares nothing with the sorting path it checks.
    """
    z = np.asarray(sliced_tokens, dtype=np.float64)
    x = np.asarray(sliced_refs, dtype=np.float64)
    if z.shape != x.shape or z.ndim != 1:
        raise ShapeError("expected two vectors of equal length")
    if len(z) > 8:
        raise ValueError(f"brute force refused for S={len(z)} > 8")
    perms = _permutations(len(z))
    costs = assignment_cost(z, x, perms)
    best = int(np.argmin(costs))
    return float(costs[best]), tuple(int(i) for i in perms[best])


_PERM_CACHE: dict[int, np.ndarray] = {}


def _permutations(n: int) -> np.ndarray:
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return _PERM_CACHE[n]


def assignment_cost(z: np.ndarray, x: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Cost of each assignment row in ``perms`` (shape P x S); z[perm[i]] goes to x[i]."""
    return ((z[perms] - x[None, :]) ** 2).sum(axis=1)


def induced_assignment(sliced_tokens, sliced_refs) -> np.ndarray:
    """The permutation encoded by sort-matching: reference i receives token sigma[i]."""
    z = torch.as_tensor(sliced_tokens)
    x = torch.as_tensor(sliced_refs)
    pi_z = torch.argsort(z, stable=True)
    rank_x = torch.argsort(torch.argsort(x, stable=True), stable=True)
    return pi_z[rank_x].numpy()


def pswe_embed(tokens: torch.Tensor, slicers: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Slice embedding of shape (..., S, L).

    tokens: (..., S, D); slicers: (L, D) unit rows; refs: (S, L).
    """
    if tokens.shape[-2] != refs.shape[0]:
        raise ShapeError(f"{tokens.shape[-2]} tokens but {refs.shape[0]} references")
    if slicers.shape[0] != refs.shape[1]:
        raise ShapeError("slicer count differs from reference columns")
    proj = slice_project(tokens, slicers.transpose(0, 1))
    z_sorted, order = torch.sort(proj, dim=-2, stable=True)
    rank_x = torch.argsort(torch.argsort(refs, dim=0, stable=True), dim=0, stable=True)
    _note(order)
    _note(rank_x)
    matched = torch.gather(z_sorted, -2, rank_x.expand_as(z_sorted))
    return matched - refs


_SURROGATE: list[dict] = []


@contextlib.contextmanager
def stm_surrogate_at(bases: Optional[list] = None):
    """Record (``bases=None``) or replay slice embeddings seen by ``stm_select``.

    In replay mode each ``stm_select`` call, in order, evaluates the smooth
    surrogate anchored at the recorded base point instead of the hard
    selection. Finite differences of a replayed forward pass then match the
    straight-through backward pass of the original one.
    """
    frame = {"bases": [] if bases is None else bases, "replay": bases is not None, "i": 0}
    _SURROGATE.append(frame)
    try:
        yield frame["bases"]
    finally:
        _SURROGATE.pop()


def stm_select(z: torch.Tensor) -> torch.Tensor:
    """Straight-through maximum over the S axis of (..., S, L).

    Forward value is the exact column maximum; the backward pass is that of
    sum_j (onehot_j - y_j + y_j) z_j with the first two terms held constant,
    y being the column softmax.
    """
    if _SURROGATE:
        frame = _SURROGATE[-1]
        if frame["replay"]:
            base = frame["bases"][frame["i"]]
            frame["i"] += 1
            return stm_surrogate(z, base)
        frame["bases"].append(z.detach().clone())
    y = torch.softmax(z, dim=-2)
    pick = torch.argmax(z, dim=-2, keepdim=True)
    _note(pick)
    hard = torch.zeros_like(z).scatter_(-2, pick, 1.0)
    # y - y.detach() is exactly zero forward, so mask == hard bitwise
    mask = hard + (y - y.detach())
    return (z * mask).sum(dim=-2)


def stm_surrogate(z: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    """Smooth function whose gradient at ``base`` equals the STM backward pass."""
    with torch.no_grad():
        y0 = torch.softmax(base, dim=-2)
        pick = torch.argmax(base, dim=-2, keepdim=True)
        k = torch.zeros_like(base).scatter_(-2, pick, 1.0) - y0
    return ((k + torch.softmax(z, dim=-2)) * z).sum(dim=-2)


def unit_rows(w: torch.Tensor) -> torch.Tensor:
    return w / w.norm(dim=-1, keepdim=True)


@dataclass
class PoolSizes:
    dim: int
    num_refs: int
    num_slices: int


class SlicedPool(nn.Module):
    """Learnable references (S x L) and slicers (L x D) with PSWE + STM."""

    def __init__(self, dim: int, num_refs: int, num_slices: int, generator=None):
        super().__init__()
        if num_refs < 1 or num_slices < 1:
            raise ValueError("need at least one reference and one slice")
        self.sizes = PoolSizes(dim, num_refs, num_slices)
        self.refs = nn.Parameter(torch.randn(num_refs, num_slices, generator=generator))
        self.slicers = nn.Parameter(unit_rows(torch.randn(num_slices, dim, generator=generator)))

    @torch.no_grad()
    def renormalize(self) -> None:
        self.slicers.copy_(unit_rows(self.slicers))

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return pswe_embed(tokens, self.slicers, self.refs)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return stm_select(self.embed(tokens))


def aswp_pool(hidden_states: torch.Tensor, resampler, pool: SlicedPool) -> torch.Tensor:
    """Resample (..., T, D) states to S latents, then slice-pool to (..., L)."""
    if hidden_states.shape[-2] < 1:
        raise ShapeError("need at least one hidden state")
    return pool(resampler(hidden_states))


class ASWPool(nn.Module):
    def __init__(self, dim: int, num_refs: int, num_slices: int, heads: int, generator=None):
        super().__init__()
        from .resampler import LatentResampler

        self.resampler = LatentResampler(dim, num_refs, heads, generator=generator)
        self.pool = SlicedPool(dim, num_refs, num_slices, generator=generator)

    @property
    def out_dim(self) -> int:
        return self.pool.sizes.num_slices

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        return aswp_pool(hidden_states, self.resampler, self.pool)

