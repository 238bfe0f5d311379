"""Recall@k and token-geometry diagnostics."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def _cosine_table(query_embs, cand_embs) -> np.ndarray:
    q = np.asarray(torch.as_tensor(query_embs).detach().double())
    c = np.asarray(torch.as_tensor(cand_embs).detach().double())
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    return q @ c.T


def top_k(sim: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most similar candidates per row; ties go to the lower index."""
    return np.argsort(-sim, axis=1, kind="stable")[:, :k]


def recall_at_k(query_embs, cand_embs, gold, k: int) -> float:
    sim = _cosine_table(query_embs, cand_embs)
    gold = np.asarray(gold)
    n_cand = sim.shape[1]
    if not 1 <= k <= n_cand:
        raise ValueError(f"k={k} outside [1, {n_cand}]")
    if gold.shape != (sim.shape[0],) or (gold < 0).any() or (gold >= n_cand).any():
        raise IndexError("gold index out of range")
    hits = (top_k(sim, k) == gold[:, None]).any(axis=1)
    return float(hits.mean())


def class_recall_at_k(query_embs, cand_embs, query_labels, cand_labels, k: int) -> float:
    """Hit when any of the top-k candidates carries the query's target label."""
    sim = _cosine_table(query_embs, cand_embs)
    if not 1 <= k <= sim.shape[1]:
        raise ValueError(f"k={k} outside [1, {sim.shape[1]}]")
    labels = np.asarray(cand_labels)[top_k(sim, k)]
    return float((labels == np.asarray(query_labels)[:, None]).any(axis=1).mean())


def mean_offdiag_abs_cosine(tokens: torch.Tensor) -> float:
    """Mean |cos| between distinct tokens of each (n, N, D) item, averaged over items."""
    t = torch.nn.functional.normalize(tokens.detach().double(), dim=-1)
    g = (t @ t.transpose(-1, -2)).abs()
    n = g.shape[-1]
    off = g.sum(dim=(-1, -2)) - torch.diagonal(g, dim1=-2, dim2=-1).sum(-1)
    return float((off / (n * (n - 1))).mean())


class MetricsWriter:
    """Append-only JSON Lines sink; one record per event."""

    def __init__(self, path=None, seed: int = 0):
        self.path = Path(path) if path is not None else None
        self.seed = seed
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, step: int, stage: int, task: str, metric: str, value: float) -> dict:
        rec = {
            "step": int(step),
            "stage": int(stage),
            "task": task,
            "metric": metric,
            "value": float(value),
            "seed": int(self.seed),
        }
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
