"""SMMix: self-motivated image mixing for vision transformers, on a numpy autodiff core."""
from __future__ import annotations

from .mixing import MixPlan, MixedBatch, apply_cutmix, apply_mixup, apply_smmix, select_regions
from .objective import LossBreakdown, LossSwitches, total_loss
from .train import TrainConfig, Trainer, evaluate, train_step
from .vit import ModelConfig, VisionTransformer, image_attention_score

__version__ = "0.1.0"

__all__ = [
    "LossBreakdown", "LossSwitches", "MixPlan", "MixedBatch", "ModelConfig", "TrainConfig",
    "Trainer", "VisionTransformer", "apply_cutmix", "apply_mixup", "apply_smmix", "evaluate",
    "image_attention_score", "select_regions", "total_loss", "train_step",
]
