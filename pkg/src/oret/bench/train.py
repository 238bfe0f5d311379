"""Two-stage training on the synthetic benchmark, evaluation, and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from ..config import RunConfig, StageConfig
from ..losses import SimilarityBatch, total_loss
from .data import SyntheticDataset, TaskSpec, TASKS, gen_dataset, get_tasks
from .metrics import MetricsWriter, class_recall_at_k, mean_offdiag_abs_cosine
from .model import RetrievalModel
from .sampler import Batch, TaskBalancedSampler

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
TASK_ORDER = list(TASKS)


class TrainingError(RuntimeError):
    pass


def _key(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def build_dataset(cfg: RunConfig) -> SyntheticDataset:
    d = cfg.data
    return gen_dataset(
        d.classes,
        d.per_class,
        d.modalities,
        cfg.seed,
        d_enc=d.d_enc,
        tokens=d.tokens,
        video_grid=tuple(d.video_grid),
        noise=d.noise,
        holdout=d.holdout,
        shift=d.shift,
        shards=d.shards,
    )


def build_model(cfg: RunConfig) -> RetrievalModel:
    m = cfg.model
    dtype = _DTYPES[cfg.train.dtype]
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        torch.manual_seed(_key(cfg.seed, 5003))
        model = RetrievalModel(
            cfg.data.d_enc,
            m.dim,
            m.heads,
            m.num_latents,
            m.num_refs,
            m.num_slices,
            num_tasks=len(TASK_ORDER),
            modalities=cfg.data.modalities,
            video_grid=tuple(m.video_grid),
            max_frames=m.max_frames,
            pooling=m.pooling,
            modality_latents=m.modality_latents,
        )
    finally:
        torch.set_default_dtype(prev)
    return model


class Bench:
    """Dataset tensors plus the model, with batch-level forward passes."""

    def __init__(self, cfg: RunConfig, model: Optional[RetrievalModel] = None, dataset=None):
        self.cfg = cfg
        self.dtype = _DTYPES[cfg.train.dtype]
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.items = {m: torch.as_tensor(a, dtype=self.dtype) for m, a in self.dataset.items.items()}
        self.model = model if model is not None else build_model(cfg)

    def tokens(self, modality: str, classes, instances) -> torch.Tensor:
        return self.items[modality][torch.as_tensor(classes), torch.as_tensor(instances)]

    def modification(self, classes) -> torch.Tensor:
        return torch.as_tensor(self.dataset.modification(classes), dtype=self.dtype)

    def embed_queries(self, task: TaskSpec, classes, instances):
        mod = self.modification(classes) if task.composed else None
        return self.model.embed(
            task.query_modality,
            self.tokens(task.query_modality, classes, instances),
            TASK_ORDER.index(task.name),
            mod,
        )

    def embed_candidates(self, modality: str, classes, instances):
        return self.model.embed(
            modality, self.tokens(modality, classes, instances), self.model.candidate_marker
        )

    def batch_loss(self, batch: Batch, generator: Optional[torch.Generator] = None):
        """Loss of one batch; media are resampled per modality in a single pass each."""
        # rows: queries of every chunk in order, then candidates of every chunk in order
        rows = []
        for chunk in batch.chunks:
            t = chunk.task
            rows.append((t.query_modality, chunk.query_classes, chunk.query_instances,
                         TASK_ORDER.index(t.name), t.composed))
        for chunk in batch.chunks:
            rows.append((chunk.task.target_modality, chunk.target_classes, chunk.target_instances,
                         self.model.candidate_marker, False))
        sizes = [len(r[1]) for r in rows]
        resampled: list = [None] * len(rows)
        media = []
        for m in dict.fromkeys(r[0] for r in rows):
            idx = [i for i, r in enumerate(rows) if r[0] == m]
            classes = np.concatenate([rows[i][1] for i in idx])
            inst = np.concatenate([rows[i][2] for i in idx])
            res = self.model.media(m, self.tokens(m, classes, inst))
            media.append(res)
            for i, part in zip(idx, torch.split(res, [sizes[i] for i in idx])):
                resampled[i] = part
        emb = [None] * len(rows)
        for composed in (False, True):
            idx = [i for i, r in enumerate(rows) if r[4] == composed]
            if not idx:
                continue
            res = torch.cat([resampled[i] for i in idx])
            markers = torch.as_tensor(np.concatenate([np.full(sizes[i], rows[i][3]) for i in idx]))
            mod = self.modification(np.concatenate([rows[i][1] for i in idx])) if composed else None
            out = self.model.compose_and_pool(res, markers, mod)
            for i, part in zip(idx, torch.split(out, [sizes[i] for i in idx])):
                emb[i] = part
        half = len(batch.chunks)
        labels = None
        if self.cfg.train.class_aware_negatives:
            labels = np.concatenate([c.target_classes for c in batch.chunks])
        sims = SimilarityBatch.in_batch(torch.cat(emb[:half]), torch.cat(emb[half:]), labels, generator)
        return total_loss(sims, media, self.cfg.loss, generator=generator)

    @torch.no_grad()
    def evaluate(self, task: TaskSpec, k: Optional[int] = None) -> float:
        k = k or self.cfg.train.eval_k
        ds = self.dataset
        inst = ds.split_instances("test")
        classes = np.repeat(np.arange(ds.classes), len(inst))
        instances = np.tile(inst, ds.classes)
        q = self._chunked(lambda sl: self.embed_queries(task, classes[sl], instances[sl])[0], len(classes))
        c = self._chunked(
            lambda sl: self.embed_candidates(task.target_modality, classes[sl], instances[sl])[0],
            len(classes),
        )
        return class_recall_at_k(q, c, ds.target_classes(task, classes), classes, k)

    @torch.no_grad()
    def token_coherence(self) -> float:
        """Mean off-diagonal |cos| among resampled tokens of held-out media items."""
        ds = self.dataset
        inst = ds.split_instances("test")
        classes = np.repeat(np.arange(ds.classes), len(inst))
        instances = np.tile(inst, ds.classes)
        vals = []
        for m in ds.modalities:
            toks = self._chunked(lambda sl: self.model.media(m, self.tokens(m, classes[sl], instances[sl])), len(classes))
            vals.append(mean_offdiag_abs_cosine(toks))
        return float(np.mean(vals))

    def _chunked(self, fn, n: int) -> torch.Tensor:
        size = self.cfg.train.eval_batch
        return torch.cat([fn(slice(i, min(i + size, n))) for i in range(0, n, size)])


def lr_at(stage: StageConfig, step: int) -> float:
    """Linear warm-up to ``lr`` then cosine decay to ``min_lr`` over the stage."""
    if stage.warmup and step < stage.warmup:
        return stage.lr * (step + 1) / stage.warmup
    span = max(stage.steps - stage.warmup, 1)
    progress = min(max(step - stage.warmup, 0) / span, 1.0)
    return stage.min_lr + 0.5 * (stage.lr - stage.min_lr) * (1 + math.cos(math.pi * progress))


def trainable(model: RetrievalModel, stage: StageConfig) -> list[tuple[str, torch.nn.Parameter]]:
    groups = model.groups()
    names = ["projectors", "resampler", "pool"] + (["composer"] if stage.train_composer else [])
    return [p for g in names for p in groups[g]]


def make_optimizer(model: RetrievalModel, stage: StageConfig, weight_decay: float):
    params = trainable(model, stage)
    active = {id(p) for _, p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in active)
    opt = torch.optim.AdamW([p for _, p in params], lr=stage.lr, weight_decay=weight_decay)
    return opt, params


def _validate(cfg: RunConfig) -> None:
    for name in ("stage1", "stage2"):
        st: StageConfig = getattr(cfg, name)
        if st.steps < 0 or st.accum < 1 or st.lr < 0 or st.min_lr < 0:
            raise ValueError(f"{name}: invalid schedule")
        get_tasks(st.tasks)
    get_tasks(cfg.train.eval_tasks)
    get_tasks([cfg.train.primary_task])
    if cfg.train.dtype not in _DTYPES:
        raise ValueError(f"unknown dtype {cfg.train.dtype!r}")


@dataclass
class TrainState:
    model: RetrievalModel
    optimizer: Optional[torch.optim.Optimizer]
    opt_params: list
    step: int
    stage: int
    seed: int

    def to_checkpoint(self, cfg: RunConfig) -> Checkpoint:
        tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        if self.optimizer is not None:
            tensors["optim.stage"] = np.array(float(self.stage))
            for name, p in self.opt_params:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                tensors[f"optim.{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
                tensors[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
                tensors[f"optim.{name}.step"] = np.array(float(st["step"]))
        return Checkpoint(tensors, cfg.to_json(), self.step)


def load_model(ckpt: Checkpoint, cfg: Optional[RunConfig] = None) -> tuple[RunConfig, RetrievalModel]:
    cfg = cfg or RunConfig.from_json(ckpt.config_json)
    model = build_model(cfg)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    return cfg, model


def _restore_optimizer(state: TrainState, ckpt: Checkpoint) -> None:
    t = ckpt.tensors
    if "optim.stage" not in t or int(t["optim.stage"]) != state.stage:
        return
    for name, p in state.opt_params:
        key = f"optim.{name}"
        if f"{key}.exp_avg" not in t:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(t[f"{key}.step"].item(), dtype=torch.float32),
            "exp_avg": torch.from_numpy(t[f"{key}.exp_avg"]).clone(),
            "exp_avg_sq": torch.from_numpy(t[f"{key}.exp_avg_sq"]).clone(),
        }


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    recalls: dict[str, float] = field(default_factory=dict)
    coherence: float = float("nan")
    bench: Optional[Bench] = None


def _dump_bad_batch(out: Optional[Path], step: int, batch: Batch, parts: dict) -> str:
    info = {
        "step": step,
        "batch_index": batch.index,
        "chunks": [
            {
                "task": c.task.name,
                "query_classes": c.query_classes.tolist(),
                "query_instances": c.query_instances.tolist(),
                "target_classes": c.target_classes.tolist(),
                "target_instances": c.target_instances.tolist(),
            }
            for c in batch.chunks
        ],
        "losses": {k: float(v.detach()) for k, v in parts.items()},
    }
    if out is None:
        return json.dumps(info)
    path = out / f"nan_batch_step{step}.json"
    path.write_text(json.dumps(info, indent=1))
    return str(path)


def train_run(
    cfg: RunConfig,
    out_dir=None,
    resume=None,
    stop_after: Optional[int] = None,
    evaluate: bool = True,
) -> TrainResult:
    """Run (or resume) the two-stage schedule.

    Stage 1 updates projectors, resampler and pool with the composer frozen;
    stage 2 also trains the composer and accumulates gradients over
    ``stage2.accum`` micro-batches. Every batch and dropout mask is keyed by
    (seed, step), so resuming from a checkpoint replays the same stream.
    ``stop_after`` halts after that many total steps (used to cut checkpoints).
    """
    _validate(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl" if out is not None else None, seed=cfg.seed)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else read_checkpoint(resume)
        _, model = load_model(ckpt, cfg)
        start = ckpt.step
    else:
        ckpt, model, start = None, build_model(cfg), 0
    bench = Bench(cfg, model)
    s1, s2 = cfg.stage1.steps, cfg.stage2.steps
    total = s1 + s2
    end = total if stop_after is None else min(total, stop_after)
    stage_cfgs = {1: cfg.stage1, 2: cfg.stage2}
    samplers = {
        k: TaskBalancedSampler(
            bench.dataset, get_tasks(st.tasks), st.batch_size, st.tasks_per_batch, st.datasets_per_task,
            cfg.seed, stream=k,
        )
        for k, st in stage_cfgs.items()
        if st.steps > 0
    }

    state = TrainState(model, None, [], start, 1 if start < s1 else 2, cfg.seed)
    recalls: dict[str, float] = {}

    def enter_stage(stage: int, restore: bool) -> None:
        state.stage = stage
        state.optimizer, state.opt_params = make_optimizer(model, stage_cfgs[stage], cfg.train.weight_decay)
        if restore and ckpt is not None:
            _restore_optimizer(state, ckpt)

    def stage_end_eval(stage: int, step: int) -> None:
        if not evaluate:
            return
        model.eval()
        for name in cfg.train.eval_tasks:
            task = TASKS[name]
            if stage == 1 and name not in cfg.stage1.tasks:
                continue
            r = bench.evaluate(task)
            recalls[name] = r
            writer.emit(step, stage, name, f"recall@{cfg.train.eval_k}", r)
        model.train()

    current = None
    for step in range(start, end):
        stage = 1 if step < s1 else 2
        local = step if stage == 1 else step - s1
        st = stage_cfgs[stage]
        if stage != current:
            if stage == 2 and step == s1:
                if s1 > 0:
                    stage_end_eval(1, step)
                if {"image", "video"} <= set(model.resampler.modality_latents):
                    model.resampler.copy_modality_latents("image", "video")
            enter_stage(stage, restore=step == start)
            current = stage
        lr = lr_at(st, local)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        state.optimizer.zero_grad(set_to_none=True)
        sums: dict[str, float] = {}
        for micro in range(st.accum):
            batch = samplers[stage].batch(local * st.accum + micro)
            gen = torch.Generator().manual_seed(_key(cfg.seed, 9176, step, micro))
            parts = bench.batch_loss(batch, gen)
            if not all(torch.isfinite(v) for v in parts.values()):
                where = _dump_bad_batch(out, step, batch, parts)
                raise TrainingError(f"non-finite loss at step {step}; batch dumped to {where}")
            (parts["total"] / st.accum).backward()
            parts = {k_: v.detach() for k_, v in parts.items()}
            for k_, v in parts.items():
                sums[k_] = sums.get(k_, 0.0) + v.item() / st.accum
        state.optimizer.step()
        model.renormalize()
        state.step = step + 1
        for k_ in ("total", "info_nce", "triplet", "diversity"):
            if k_ in sums:
                writer.emit(step, stage, "all", "loss" if k_ == "total" else k_, sums[k_])
        if out is not None and state.step == end and end < total:
            write_checkpoint(out / f"step{state.step}.ckpt", state.to_checkpoint(cfg))

    result = TrainResult(state, writer.records, bench=bench)
    if state.step == total:
        if s2 > 0:
            stage_end_eval(2, total)
        elif s1 > 0:
            stage_end_eval(1, total)
        if evaluate:
            model.eval()
            result.coherence = bench.token_coherence()
            writer.emit(total, state.stage, "media", "offdiag_abs_cos", result.coherence)
        result.recalls = recalls
        if out is not None:
            write_checkpoint(out / "final.ckpt", state.to_checkpoint(cfg))
    return result
