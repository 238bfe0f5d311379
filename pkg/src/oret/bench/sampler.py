"""Task-balanced batch sampling.

Each batch picks ``tasks_per_batch`` tasks uniformly without replacement and
fills an equal share of the batch from each, drawing that share from
``datasets_per_task`` randomly chosen sub-datasets (class shards) of the task.
Batch ``i`` depends only on (seed, i), so streams can be resumed anywhere.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import SyntheticDataset, TaskSpec


@dataclass
class TaskChunk:
    task: TaskSpec
    query_classes: np.ndarray
    query_instances: np.ndarray
    target_classes: np.ndarray
    target_instances: np.ndarray

    def __len__(self) -> int:
        return len(self.query_classes)


@dataclass
class Batch:
    index: int
    chunks: list[TaskChunk]

    def __len__(self) -> int:
        return sum(len(c) for c in self.chunks)

    def counts(self) -> dict[str, int]:
        return {c.task.name: len(c) for c in self.chunks}


class TaskBalancedSampler:
    def __init__(
        self,
        dataset: SyntheticDataset,
        tasks: Sequence[TaskSpec],
        batch_size: int,
        tasks_per_batch: int,
        datasets_per_task: int,
        seed: int,
        split: str = "train",
        stream: int = 0,
    ):
        if tasks_per_batch < 1 or tasks_per_batch > len(tasks):
            raise ValueError(f"tasks_per_batch={tasks_per_batch} but only {len(tasks)} tasks")
        if batch_size % tasks_per_batch:
            raise ValueError("batch_size must be divisible by tasks_per_batch")
        if not 1 <= datasets_per_task <= dataset.shards:
            raise ValueError(f"datasets_per_task must be in [1, {dataset.shards}]")
        self.dataset = dataset
        self.tasks = list(tasks)
        self.batch_size = batch_size
        self.tasks_per_batch = tasks_per_batch
        self.datasets_per_task = datasets_per_task
        self.seed = seed
        self.stream = stream
        self.instances = dataset.split_instances(split)

    @property
    def per_task(self) -> int:
        return self.batch_size // self.tasks_per_batch

    def batch(self, index: int) -> Batch:
        rng = np.random.default_rng([self.seed, 104729, self.stream, index])
        picked = rng.choice(len(self.tasks), size=self.tasks_per_batch, replace=False)
        chunks = [self._chunk(self.tasks[t], rng) for t in sorted(picked)]
        return Batch(index, chunks)

    def _chunk(self, task: TaskSpec, rng: np.random.Generator) -> TaskChunk:
        ds = self.dataset
        shards = rng.choice(ds.shards, size=self.datasets_per_task, replace=False)
        shares = np.full(len(shards), self.per_task // len(shards))
        shares[: self.per_task % len(shards)] += 1
        classes = []
        for shard, share in zip(sorted(shards), shares):
            pool = ds.shard_classes(shard)
            classes.append(rng.choice(pool, size=share, replace=share > len(pool)))
        qc = np.concatenate(classes)
        n = len(self.instances)
        qi = self.instances[rng.integers(0, n, size=len(qc))]
        ti = self.instances[rng.integers(0, n, size=len(qc))]
        if task.query_modality == task.target_modality and not task.composed and n > 1:
            # same-modality positives must be a different instance
            clash = ti == qi
            ti[clash] = self.instances[(np.searchsorted(self.instances, qi[clash]) + 1) % n]
        return TaskChunk(task, qc, qi, ds.target_classes(task, qc), ti)

    def __iter__(self) -> Iterator[Batch]:
        for i in itertools.count():
            yield self.batch(i)


def task_balanced_batches(
    dataset, tasks, batch_size, tasks_per_batch, datasets_per_task, seed, **kw
) -> Iterator[Batch]:
    return iter(TaskBalancedSampler(dataset, tasks, batch_size, tasks_per_batch, datasets_per_task, seed, **kw))
