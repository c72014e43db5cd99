"""Clipped policy-gradient optimization with policy drift, on tiny softmax policies."""

from .kernels import BACKEND
from .losses import ALGORITHMS, LossConfig, LossReport, RolloutGroup, compute_loss
from .policy import PolicyParams, PolicySnapshot, snapshot
from .tasks import Task
from .trainer import CollapseFlags, MetricsRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = ["ALGORITHMS", "BACKEND", "CollapseFlags", "LossConfig", "LossReport", "MetricsRecord",
           "PolicyParams", "PolicySnapshot", "RolloutGroup", "Task", "TrainConfig", "compute_loss",
           "snapshot", "train"]
