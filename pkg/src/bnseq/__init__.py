"""A small numpy laboratory for normalization pitfalls in online sequence models."""

from .autodiff import Tensor, no_grad
from .experiments import (ExperimentConfig, cheat_comparison, feature_shift_probe, run_grid,
                          train_run)
from .model import ModelConfig, SequenceModel
from .normalization import NormLayer
from .toy import run_toy_experiment
from .workflow import WorkflowConfig, generate_dataset

__all__ = ["ExperimentConfig", "ModelConfig", "NormLayer", "SequenceModel", "Tensor", "WorkflowConfig",
           "cheat_comparison", "feature_shift_probe", "generate_dataset", "no_grad", "run_grid",
           "run_toy_experiment", "train_run"]
__version__ = "0.1.0"
