"""Toy-scale global-matching + recurrent-refinement optical flow and point tracking."""

from megaflow.config import LossConfig, ModelConfig, TrainConfig
from megaflow.core import (
    FlowField,
    ImageSequence,
    bilinear_sample,
    coords_grid,
    downsample_flow,
    upsample_flow,
)
from megaflow.model import MegaFlow

__all__ = [
    "FlowField",
    "ImageSequence",
    "LossConfig",
    "MegaFlow",
    "ModelConfig",
    "TrainConfig",
    "bilinear_sample",
    "coords_grid",
    "downsample_flow",
    "upsample_flow",
]

__version__ = "0.1.0"
