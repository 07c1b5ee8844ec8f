"""Multimodal gait recognition (silhouette, parsing, optical flow) with
common/different branch fusion, on a small numpy autodiff engine."""

from .checkpoint import checkpoint_load, checkpoint_save
from .model import ModelConfig, MultiGait, build
from .training import TrainConfig, train

__all__ = ["ModelConfig", "MultiGait", "TrainConfig", "build", "checkpoint_load", "checkpoint_save", "train"]
