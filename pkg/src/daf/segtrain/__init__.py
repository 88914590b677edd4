"""Segmentation objectives, the composite model, teacher pretraining and the training loop."""
from .losses import HardMiningBatch, aux_loss, mine_hard_negatives, seg_loss, stage_targets, total_loss
from .model import DAFModel, infer, infer_batch, to_tensor
from .pretrain import PretrainResult, pretrain_teacher
from .trainer import TrainResult, train

__all__ = [
    "HardMiningBatch", "aux_loss", "mine_hard_negatives", "seg_loss", "stage_targets", "total_loss",
    "DAFModel", "infer", "infer_batch", "to_tensor", "PretrainResult", "pretrain_teacher",
    "TrainResult", "train",
]
