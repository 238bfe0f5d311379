"""Synthetic omni-modal items standing in for frozen encoder outputs.

Every class owns a unit prototype in encoder space. A modality is a fixed
random rotation of that space; an item is its class prototype pushed
through the rotation, repeated over tokens, plus i.i.d. Gaussian noise.
Video items are a (T, H, W) grid of such tokens.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    name: str
    query_modality: str
    target_modality: str
    composed: bool = False

    @property
    def modalities(self) -> tuple[str, ...]:
        return (self.query_modality, self.target_modality)


TASKS = {
    t.name: t
    for t in [
        TaskSpec("i2a", "image", "audio"),
        TaskSpec("a2i", "audio", "image"),
        TaskSpec("i2i", "image", "image"),
        TaskSpec("a2a", "audio", "audio"),
        TaskSpec("v2a", "video", "audio"),
        TaskSpec("a2v", "audio", "video"),
        TaskSpec("i2v", "image", "video"),
        TaskSpec("v2i", "video", "image"),
        TaskSpec("it2i", "image", "image", composed=True),
    ]
}


def get_tasks(names: Sequence[str]) -> list[TaskSpec]:
    unknown = [n for n in names if n not in TASKS]
    if unknown:
        raise ValueError(f"unknown tasks {unknown}; known: {sorted(TASKS)}")
    return [TASKS[n] for n in names]


@dataclass
class SyntheticDataset:
    prototypes: np.ndarray  # (classes, d_enc)
    transforms: dict[str, np.ndarray]  # modality -> (d_enc, d_enc)
    items: dict[str, np.ndarray]  # modality -> (classes, per_class, M, d_enc) or (..., T, H, W, d_enc)
    holdout: int
    shift: int = 1
    shards: int = 2
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def per_class(self) -> int:
        return next(iter(self.items.values())).shape[1]

    @property
    def modalities(self) -> list[str]:
        return list(self.items)

    def __len__(self) -> int:
        return sum(a.shape[0] * a.shape[1] for a in self.items.values())

    def split_instances(self, split: str) -> np.ndarray:
        n_train = self.per_class - self.holdout
        if split == "train":
            return np.arange(n_train)
        if split == "test":
            return np.arange(n_train, self.per_class)
        raise ValueError(f"unknown split {split!r}")

    def transition(self, classes: np.ndarray) -> np.ndarray:
        """Target class of a composed query."""
        return (np.asarray(classes) + self.shift) % self.classes

    def modification(self, classes: np.ndarray) -> np.ndarray:
        """Encoder-space edit vector turning class c into its composed target."""
        c = np.asarray(classes)
        return self.prototypes[self.transition(c)] - self.prototypes[c]

    def shard_classes(self, shard: int) -> np.ndarray:
        return np.arange(shard, self.classes, self.shards)

    def target_classes(self, task: TaskSpec, classes: np.ndarray) -> np.ndarray:
        return self.transition(classes) if task.composed else np.asarray(classes)


def _rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_dataset(
    classes: int,
    per_class: int,
    modalities: Sequence[str],
    seed: int,
    d_enc: int = 24,
    tokens: int = 16,
    video_grid: tuple[int, int, int] = (8, 2, 2),
    noise: float = 0.5,
    holdout: int = 5,
    shift: int = 1,
    shards: int = 2,
) -> SyntheticDataset:
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or tokens < 1 or d_enc < 1 or not modalities:
        raise ValueError("degenerate dataset size")
    if not 0 <= holdout < per_class:
        raise ValueError("holdout must leave at least one training instance")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng([seed, 7001])
    protos = rng.standard_normal((classes, d_enc))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    transforms = {}
    items = {}
    for m in modalities:
        transforms[m] = _rotation(rng, d_enc)
        base = protos @ transforms[m]
        if m == "video":
            shape = (classes, per_class, *video_grid, d_enc)
            mean = base[:, None, None, None, None, :]
        else:
            shape = (classes, per_class, tokens, d_enc)
            mean = base[:, None, None, :]
        items[m] = mean + noise * rng.standard_normal(shape)
    min_gap = min(
        np.linalg.norm(protos[i] - protos[j]) for i in range(classes) for j in range(i + 1, classes)
    )
    return SyntheticDataset(
        protos,
        transforms,
        items,
        holdout,
        shift=shift,
        shards=shards,
        meta={"noise": noise, "min_prototype_gap": float(min_gap), "seed": seed},
    )
