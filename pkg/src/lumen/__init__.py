"""Depth-guided, flash-simulated low-light image enhancement."""

from .enhancer import ForwardArtifacts, LumenModel, ModelConfig, count_parameters, lumen_forward
from .flash import FlashParams
from .losses import LossWeights

__all__ = [
    "ForwardArtifacts", "FlashParams", "LossWeights", "LumenModel", "ModelConfig",
    "count_parameters", "lumen_forward",
]
__version__ = "0.1.0"
