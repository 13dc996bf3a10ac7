"""Derive small task-specific Vision Transformers from a trained base model."""

__version__ = "0.1.0"

from .adaptive import PruneConfig
from .container import load_model, save_model
from .data import Dataset, SubTask, SyntheticSpec, load_dataset, make_synthetic
from .errors import DimensionError, FormatError, NumericError, TrainingDiverged, UnreachableTarget
from .model import ModelConfig, VitModel, forward, init_model
from .pipeline import RecoveryConfig, derive, random_prune

__all__ = [
    "PruneConfig", "RecoveryConfig", "derive", "random_prune", "load_model", "save_model",
    "Dataset", "SubTask", "SyntheticSpec", "load_dataset", "make_synthetic", "ModelConfig",
    "VitModel", "forward", "init_model", "DimensionError", "FormatError", "NumericError",
    "TrainingDiverged", "UnreachableTarget",
]
