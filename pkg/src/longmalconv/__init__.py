"""Byte-level convolutional malware classifiers (MalConv, MalConv with global
channel gating) whose training memory does not grow with file length."""

from .data import (DataError, DatasetIndex, FileTokens, RandomTokens, SyntheticSpec, generate_synthetic,
                   load_index, tokenize)
from .models import Explanation, LowmemOptions, MalConvGcgModel, MalConvModel, Model, ModelConfig
from .numerics import InputError, NumericError
from .training import (AdamWState, Checkpoint, CheckpointError, TrainConfig, evaluate, load_checkpoint,
                       roc_auc, save_checkpoint, train)

__all__ = [
    "AdamWState", "Checkpoint", "CheckpointError", "DataError", "DatasetIndex", "Explanation",
    "FileTokens", "InputError", "LowmemOptions", "MalConvGcgModel", "MalConvModel", "Model",
    "ModelConfig", "NumericError", "RandomTokens", "SyntheticSpec", "TrainConfig", "evaluate",
    "generate_synthetic", "load_checkpoint", "load_index", "roc_auc", "save_checkpoint", "tokenize",
    "train",
]
