"""Gated batch normalization and multi-norm adversarial robustness on small CNNs."""

from .attacks import AttackSpec, Norm
from .gbn import GatedBatchNorm, GatingMode
from .models import LeNet, ModelConfig
from .train import EvalReport, TrainConfig

__all__ = ["AttackSpec", "Norm", "GatedBatchNorm", "GatingMode", "LeNet", "ModelConfig",
           "EvalReport", "TrainConfig"]
__version__ = "0.1.0"
