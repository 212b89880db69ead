"""Desk-scale shared-encoder multimodal pretraining on numpy."""
from .errors import ConfigError, TrainingError
from .model import MoMoModel, ModelConfig
from .training import StageConfig, cmga_step, run_stage, transition

__all__ = ["ConfigError", "TrainingError", "MoMoModel", "ModelConfig", "StageConfig", "cmga_step", "run_stage",
           "transition"]
__version__ = "0.1.0"
