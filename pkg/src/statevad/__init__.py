"""Video anomaly detection with a spatio-temporal auto-trans-encoder and test-time input perturbation."""

from .model import ModelConfig, StateModel, init_model, state_forward
from .synth import GenConfig, generate_dataset
from .trainer import Checkpoint, ScoreStats, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "GenConfig", "ModelConfig", "ScoreStats", "StateModel", "TrainConfig",
    "generate_dataset", "init_model", "load_checkpoint", "save_checkpoint", "state_forward", "train",
]
