"""Residual U-Net for water segmentation, written against numpy only."""

from .metrics import binary_accuracy, dice_coeff, dice_hard, dice_loss, iou_hard, jaccard_coeff
from .model import ModelConfig, backward, forward, init_params, loss_and_grads, param_shapes
from .optim import AdamState, adam_step
from .train import TrainConfig, TrainReport, evaluate, train

__all__ = [
    "AdamState",
    "ModelConfig",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "backward",
    "binary_accuracy",
    "dice_coeff",
    "dice_hard",
    "dice_loss",
    "evaluate",
    "forward",
    "init_params",
    "iou_hard",
    "jaccard_coeff",
    "loss_and_grads",
    "param_shapes",
    "train",
]
