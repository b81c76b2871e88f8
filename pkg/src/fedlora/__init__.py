"""Federated LoRA fine-tuning simulator for a small CLIP-style dual encoder."""
from .errors import FedLoraError
from .experiment import ExperimentConfig, parse_config, run_experiment
from .model import AdaptationMode, DualEncoderModel, ModelConfig, build_model, count_params

__all__ = [
    "AdaptationMode",
    "DualEncoderModel",
    "ExperimentConfig",
    "FedLoraError",
    "ModelConfig",
    "build_model",
    "count_params",
    "parse_config",
    "run_experiment",
]
__version__ = "0.1.0"
