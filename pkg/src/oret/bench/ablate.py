"""Desk-scale ablation matrix: each variant trained over several seeds."""
from __future__ import annotations

import statistics
from pathlib import Path
from typing import Optional, Sequence

from ..config import RunConfig
from .train import TrainResult, train_run

# variant -> dotted-key overrides of the base config
VARIANTS: dict[str, dict] = {
    "baseline": {},
    "mean_pool": {"model.pooling": "mean"},
    "no_triplet": {"loss.mu1": 0.0},
    "no_diversity": {"loss.mu2": 0.0},
    "no_media_latents": {"model.modality_latents": False},
}


def run_variant(cfg: RunConfig, variant: str, seed: int, out: Optional[Path] = None) -> TrainResult:
    run_cfg = cfg.replace(seed=seed, **VARIANTS[variant])
    run_dir = None if out is None else Path(out) / variant / f"seed{seed}"
    if run_dir is not None:
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
    return train_run(run_cfg, run_dir)


def summarize(cfg: RunConfig, results: dict[str, list[TrainResult]]) -> dict:
    task = cfg.train.primary_task
    summary = {"task": task, "k": cfg.train.eval_k, "variants": {}}
    for name, runs in results.items():
        recalls = [r.recalls[task] for r in runs]
        coh = [r.coherence for r in runs]
        summary["variants"][name] = {
            "seeds": [r.state.seed for r in runs],
            "recall": recalls,
            "offdiag_abs_cos": coh,
            "median_recall": statistics.median(recalls),
            "median_offdiag_abs_cos": statistics.median(coh),
        }
    return summary


def run_matrix(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int], out=None) -> dict:
    results = {v: [run_variant(cfg, v, s, out) for s in seeds] for v in variants}
    return summarize(cfg, results)


def format_table(summary: dict) -> str:
    base = summary["variants"].get("baseline")
    head = f"{'variant':<18} {'median R@' + str(summary['k']):>12} {'delta':>8} {'median |cos|':>13}"
    lines = [f"task {summary['task']}", head, "-" * len(head)]
    for name, row in summary["variants"].items():
        delta = row["median_recall"] - base["median_recall"] if base else float("nan")
        lines.append(
            f"{name:<18} {row['median_recall']:>12.4f} {delta:>+8.4f} {row['median_offdiag_abs_cos']:>13.4f}"
        )
    return "\n".join(lines)
