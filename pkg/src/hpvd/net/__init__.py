"""Numpy-only hetero-phase detector: autodiff, model, training, inference."""

from .estimator import HeteroPhaseDetector
from .model import forward, fuse, init_params
from .train import TrainConfig, train

__all__ = ["HeteroPhaseDetector", "TrainConfig", "forward", "fuse", "init_params", "train"]
