"""Streaming class-incremental learning with a mean-field Bayesian classifier and replay."""

from .memory import MemoryEntry, ReplacementPolicy, ReplayBuffer, SamplingStrategy
from .metrics import EvalTrace, offline_mean, omega_all
from .ordering import DatasetRecord, OrderingKind, OrderingSpec, StreamPlan, build_stream
from .trainer import HyperParams, LearnerKind, run_experiment
from .vbnn import MeanFieldPosterior, NetShape

__all__ = [
    "DatasetRecord", "EvalTrace", "HyperParams", "LearnerKind", "MeanFieldPosterior", "MemoryEntry",
    "NetShape", "OrderingKind", "OrderingSpec", "ReplacementPolicy", "ReplayBuffer", "SamplingStrategy",
    "StreamPlan", "build_stream", "offline_mean", "omega_all", "run_experiment",
]
__version__ = "0.1.0"
