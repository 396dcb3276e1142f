from .losses import LossReport, LossWeights, descriptor_hinge_loss, detector_loss, peaky_loss, total_loss
from .network import LearnedExtractor, TinyPoint, forward, load_checkpoint, save_checkpoint
from .training import (
    NoGoodTracksError,
    Optimizer,
    RoundConfig,
    RoundReport,
    TrainConfig,
    prepare_sample,
    self_supervised_round,
    train,
    train_step,
    write_train_log,
)

__all__ = [
    "LearnedExtractor",
    "LossReport",
    "LossWeights",
    "NoGoodTracksError",
    "Optimizer",
    "RoundConfig",
    "RoundReport",
    "TinyPoint",
    "TrainConfig",
    "descriptor_hinge_loss",
    "detector_loss",
    "forward",
    "load_checkpoint",
    "peaky_loss",
    "prepare_sample",
    "save_checkpoint",
    "self_supervised_round",
    "total_loss",
    "train",
    "train_step",
    "write_train_log",
]
