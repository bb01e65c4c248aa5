"""Physics-guided single-image dehazing: inference, KV-cache policy and attribution."""

from .config import LossWeights, ModelConfig
from .model import DehazeModel
from .weights import WeightStore, init_weights, load_weights, save_weights

__all__ = [
    "DehazeModel",
    "LossWeights",
    "ModelConfig",
    "WeightStore",
    "init_weights",
    "load_weights",
    "save_weights",
]
__version__ = "0.1.0"
