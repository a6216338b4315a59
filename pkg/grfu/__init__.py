"""
Gated recurrent fusion of multimodal sensor sequences
Provides the fusion cells, a small reverse-mode autodiff core, synthetic benchmarks and training
"""

from .errors import (
    ConfigError, ContractError, DimensionError, EvaluationError, GrfuError, LoadError, TrainingError,
)
from .model import FusionModel, ModelSpec, forward_sequence, load_checkpoint, save_checkpoint
from .synthdata import ScenarioSpec, generate, load_dataset, save_dataset
from .train import TrainConfig, evaluate, train_tbptt

__all__ = [
    'ConfigError', 'ContractError', 'DimensionError', 'EvaluationError', 'GrfuError', 'LoadError',
    'TrainingError', 'FusionModel', 'ModelSpec', 'forward_sequence', 'load_checkpoint',
    'save_checkpoint', 'ScenarioSpec', 'generate', 'load_dataset', 'save_dataset', 'TrainConfig',
    'evaluate', 'train_tbptt',
]
