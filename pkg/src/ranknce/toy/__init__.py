"""Desk-scale unpaired translation testbed: procedural two-domain data,
tiny conv nets, the alternating training loop, and FID-free quality
metrics (kernel MMD and a structure-preservation score)."""

from .config import DomainSpec, TrainConfig, load_config, write_config
from .data import make_dataset
from .metrics import mmd_metric, structure_score
from .nets import ToyNets
from .train import RunHistory, TrainingAborted, train

__all__ = [
    "DomainSpec",
    "TrainConfig",
    "load_config",
    "write_config",
    "make_dataset",
    "mmd_metric",
    "structure_score",
    "ToyNets",
    "RunHistory",
    "TrainingAborted",
    "train",
]
