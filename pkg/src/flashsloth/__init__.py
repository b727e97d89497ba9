"""Embedded visual compression for a tiny multimodal language model.

Spatial attention pooling shrinks the encoder grid, an embedded query module
recovers instruction-related detail inside the language model, and an
analytic cost model accounts for tokens and FLOPs.
"""

from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .model import FlashSloth, ModelConfig
from .tensor import Tape, Tensor, backward, finite_diff_grad
from .vision import VisualGrid, hd_tile, synth_features

__all__ = [
    "CapacityError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FlashSloth",
    "ModelConfig",
    "Tape",
    "Tensor",
    "VisualGrid",
    "backward",
    "finite_diff_grad",
    "hd_tile",
    "synth_features",
]

__version__ = "0.1.0"
