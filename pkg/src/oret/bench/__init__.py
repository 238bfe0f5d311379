from .data import TASKS, SyntheticDataset, TaskSpec, gen_dataset
from .metrics import class_recall_at_k, recall_at_k
from .model import RetrievalModel, ToyComposer, mean_pool_baseline, toy_composer
from .sampler import TaskBalancedSampler, task_balanced_batches
from .train import Bench, TrainResult, TrainState, train_run

__all__ = [
    "TASKS",
    "SyntheticDataset",
    "TaskSpec",
    "gen_dataset",
    "class_recall_at_k",
    "recall_at_k",
    "RetrievalModel",
    "ToyComposer",
    "mean_pool_baseline",
    "toy_composer",
    "TaskBalancedSampler",
    "task_balanced_batches",
    "Bench",
    "TrainResult",
    "TrainState",
    "train_run",
]
