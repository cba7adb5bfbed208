"""Content- and task-aware all-in-one image restoration."""

from .backbone import CatAIR, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint
from .estimator import CatAIRRestorer, Degrader
from .metrics import EvalResult, evaluate, psnr, ssim
from .training import ExtensionPlan, TrainResult, extend, train

__all__ = [
    "CatAIR", "ModelConfig", "ModelOutput", "load_checkpoint", "save_checkpoint",
    "CatAIRRestorer", "Degrader", "EvalResult", "evaluate", "psnr", "ssim",
    "ExtensionPlan", "TrainResult", "extend", "train",
]
