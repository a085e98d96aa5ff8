"""Experiment harness: data, training loop, checkpoints and the command line."""

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .data import (Dataset, DatasetError, SynthSpec, augment, load_cifar10, mixup_batch,
                   parse_cifar_batch, synth_dataset)
from .train import (MetricsRecord, TrainConfig, TrainingDiverged, TrainResult, evaluate,
                    load_trained, train)

__all__ = [
    "CheckpointError", "load_checkpoint", "read_checkpoint", "save_checkpoint",
    "Dataset", "DatasetError", "SynthSpec", "augment", "load_cifar10", "mixup_batch",
    "parse_cifar_batch", "synth_dataset",
    "MetricsRecord", "TrainConfig", "TrainingDiverged", "TrainResult", "evaluate",
    "load_trained", "train",
]
