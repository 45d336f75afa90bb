"""NLMDA-Net for EEG vigilance classification, on a small numpy autodiff engine."""

from .model import ModelConfig, ModelParams, init_params, model_forward, param_count
from .pipeline import EpochSet, synth_generate
from .tensor import Tape, Tensor, backward, gradcheck
from .train import TrainConfig, cross_validate, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModelParams", "init_params", "model_forward", "param_count",
    "EpochSet", "synth_generate", "Tape", "Tensor", "backward", "gradcheck",
    "TrainConfig", "cross_validate", "evaluate", "fit",
]
