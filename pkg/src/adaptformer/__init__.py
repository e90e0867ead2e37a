"""Bottleneck-adapter fine-tuning of a small vision transformer, on numpy."""
from .checkpoint import CheckpointError, load, load_into, save, save_model
from .data import TaskSpec, frames_variant, generate
from .harness import RunReport, TrainConfig, TrainingAborted, evaluate, lr_at, prepare, train
from .tensor import DimensionError, NumericalError, Rng, Tensor
from .tuning import AdapterConfig, ConfigError, FreezePolicy, PromptConfig, adapter_param_count
from .vit import VitConfig, VitModel

__all__ = [
    "AdapterConfig", "CheckpointError", "ConfigError", "DimensionError", "FreezePolicy",
    "NumericalError", "PromptConfig", "Rng", "RunReport", "TaskSpec", "Tensor", "TrainConfig",
    "TrainingAborted", "VitConfig", "VitModel", "adapter_param_count", "evaluate", "frames_variant",
    "generate", "load", "load_into", "lr_at", "prepare", "save", "save_model", "train",
]
