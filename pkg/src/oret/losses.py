"""Training objective: hard-negative InfoNCE, hinge triplet, token diversity."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .tensor_core import note_discrete


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    beta: float = 0.5
    eta: float = 0.1
    mu1: float = 1.0
    mu2: float = 0.1
    gamma: float = 0.5
    diversity_dropout: float = 0.5
    triplet_raw_cosine: bool = False
    triplet_reduction: str = "sum"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 <= self.diversity_dropout < 1:
            raise ValueError("diversity_dropout must lie in [0, 1)")
        if self.triplet_reduction not in ("sum", "mean"):
            raise ValueError("triplet_reduction must be 'sum' or 'mean'")


@dataclass
class SimilarityBatch:
    """Queries, candidates and, per query, one positive and K negative candidate indices."""

    queries: torch.Tensor  # (B, L)
    candidates: torch.Tensor  # (C, L)
    positives: torch.Tensor  # (B,) long
    negatives: torch.Tensor  # (B, K) long

    def __post_init__(self):
        b = self.queries.shape[0]
        if b == 0:
            raise ValueError("empty batch")
        if self.positives.shape != (b,) or self.negatives.dim() != 2 or self.negatives.shape[0] != b:
            raise ValueError("index shapes do not match the query count")
        if (self.negatives == self.positives[:, None]).any():
            raise ValueError("a positive appears in its own negative set")

    @classmethod
    def in_batch(
        cls,
        queries: torch.Tensor,
        candidates: torch.Tensor,
        labels=None,
        generator: Optional[torch.Generator] = None,
    ) -> "SimilarityBatch":
        """Query i is paired with candidate i; the other candidates are negatives.

        With ``labels`` (target label per pair), candidates sharing the query's
        label are not negatives. Every query then keeps the same number K of
        negatives, K being the smallest available count; queries with more
        available draw K of them at random from ``generator``.
        """
        b = queries.shape[0]
        idx = torch.arange(b)
        valid = ~torch.eye(b, dtype=torch.bool)
        if labels is not None:
            lab = torch.as_tensor(labels)
            valid &= lab[None, :] != lab[:, None]
        k = int(valid.sum(1).min())
        if bool((valid.sum(1) == k).all()):
            negatives = idx.expand(b, b)[valid].reshape(b, k)
        else:
            keys = torch.rand(b, b, generator=generator, dtype=torch.float64)
            keys = keys.masked_fill(~valid, 2.0)
            negatives = torch.sort(torch.topk(keys, k, dim=1, largest=False).indices, dim=1).values
        return cls(queries, candidates, idx, negatives)


def phi(x: torch.Tensor, y: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled cosine similarity along the last axis."""
    nx = x.norm(dim=-1)
    ny = y.norm(dim=-1)
    if (nx == 0).any() or (ny == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    return (x * y).sum(-1) / (nx * ny) / tau


def _scores(batch: SimilarityBatch, tau: float):
    q = batch.queries
    c = batch.candidates
    if (q.norm(dim=-1) == 0).any() or (c.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    sim = F.normalize(q, dim=-1) @ F.normalize(c, dim=-1).T / tau
    pos = sim.gather(1, batch.positives[:, None]).squeeze(1)
    neg = sim.gather(1, batch.negatives)
    return pos, neg


def hardneg_weights(phi_negatives: torch.Tensor, beta: float) -> torch.Tensor:
    n = phi_negatives.shape[-1]
    return n * torch.softmax(beta * phi_negatives, dim=-1)


def info_nce(batch: SimilarityBatch, cfg: LossConfig) -> torch.Tensor:
    pos, neg = _scores(batch, cfg.tau)
    n = neg.shape[-1]
    if n == 0:
        return torch.zeros((), dtype=pos.dtype) + 0.0 * pos.sum()
    log_w = math.log(n) + torch.log_softmax(cfg.beta * neg, dim=-1)
    # -log(e^p / (e^p + sum w e^n)) = log(1 + sum exp(log w + n - p)), kept in log1p form
    r = log_w + neg - pos[:, None]
    m = r.max(dim=1).values.clamp(min=0.0).detach()
    per_query = m + torch.log1p(torch.expm1(-m) + torch.exp(r - m[:, None]).sum(dim=1))
    return per_query.mean()


def triplet_loss(batch: SimilarityBatch, cfg: LossConfig) -> torch.Tensor:
    pos, neg = _scores(batch, 1.0 if cfg.triplet_raw_cosine else cfg.tau)
    if neg.shape[-1] == 0:
        return torch.zeros((), dtype=pos.dtype) + 0.0 * pos.sum()
    hinge = cfg.eta + neg - pos[:, None]
    note_discrete(hinge > 0)
    per_query = torch.relu(hinge).sum(dim=1)
    if cfg.triplet_reduction == "mean":
        per_query = per_query / neg.shape[-1]
    return per_query.mean()


def smooth_l1(x: torch.Tensor, gamma: float) -> torch.Tensor:
    note_discrete(x < gamma)
    return torch.where(x < gamma, 0.5 * x * x / gamma, x - 0.5 * gamma)


def diversity_mask(shape, rate: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Keep-mask (1 = pair kept) for the Gram-matrix dropout."""
    if rate == 0:
        return torch.ones(shape)
    # draws in 64-bit so the mask does not depend on the ambient default dtype
    keep = torch.rand(shape, generator=generator, dtype=torch.float64) >= rate
    return keep.to(torch.get_default_dtype())


def diversity_loss(
    resampled: torch.Tensor,
    cfg: LossConfig,
    dropout_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Penalty on positive pairwise cosine among the N resampled tokens.

    resampled: (..., N, D). ``dropout_mask`` is a 0/1 keep-mask broadcastable
    to (..., N, N); kept pairs are rescaled by 1/(1 - rate) after the
    smooth-L1 so the expected loss equals the undropped one. Without a mask
    no dropout is applied. Returns one value per leading index.
    """
    n = resampled.shape[-2]
    if n == 0:
        raise ValueError("no tokens")
    m = F.normalize(resampled, dim=-1)
    gram = m @ m.transpose(-1, -2)
    eye = torch.eye(n, dtype=gram.dtype)
    note_discrete(gram > 0)
    x = torch.relu(gram) - eye
    if dropout_mask is not None:
        mask = dropout_mask.to(x.dtype)
        per_pair = smooth_l1(mask * x, cfg.gamma) / (1.0 - cfg.diversity_dropout)
    else:
        per_pair = smooth_l1(x, cfg.gamma)
    return per_pair.sum(dim=(-1, -2)) / (n * n)


def total_loss(
    batch: SimilarityBatch,
    resampled: Sequence[torch.Tensor],
    cfg: LossConfig,
    generator: Optional[torch.Generator] = None,
    masks: Optional[Sequence[Optional[torch.Tensor]]] = None,
) -> dict[str, torch.Tensor]:
    """Combined objective; ``resampled`` holds (n_i, N, D) token stacks, one row per media item.

    Dropout masks are drawn per media item from ``generator`` unless given.
    """
    cont = info_nce(batch, cfg)
    out = {"info_nce": cont}
    loss = cont
    if cfg.mu1:
        trip = triplet_loss(batch, cfg)
        out["triplet"] = trip
        loss = loss + cfg.mu1 * trip
    if cfg.mu2 and len(resampled):
        per_item = []
        for i, stack in enumerate(resampled):
            if masks is not None:
                mask = masks[i]
            elif cfg.diversity_dropout > 0:
                n = stack.shape[-2]
                mask = diversity_mask((stack.shape[0], n, n), cfg.diversity_dropout, generator)
            else:
                mask = None
            per_item.append(diversity_loss(stack, cfg, mask))
        div = torch.cat(per_item).mean()
        out["diversity"] = div
        loss = loss + cfg.mu2 * div
    out["total"] = loss
    return out
