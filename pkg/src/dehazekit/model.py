from __future__ import annotations

import numpy as np

from .blocks import BackboneConfig, BlockParams, backbone_forward
from .config import ModelConfig
from .estimator import AtmosphericParams, EstimatorWeights, estimate
from .reconstruction import ReconWeights, dehaze
from .weights import WeightStore, init_weights


class DehazeModel:
    """Weights, configuration and per-block KV caches for one model instance.

    Weights are immutable; the caches are the only mutable state. `dtype`
    selects the compute precision (float64 is used for gradient probes).
    """

    def __init__(self, cfg: ModelConfig, store: WeightStore, dtype=np.float32):
        self.cfg = cfg.validate()
        self.store = store.validate_against(cfg)
        self.dtype = np.dtype(dtype).type
        self.estimator = EstimatorWeights.from_store(store, self.dtype)
        self.recon = ReconWeights.from_store(store, self.dtype, cfg.bn_eps)
        self.backbone_cfg = BackboneConfig.from_model(cfg)
        self.blocks = {
            f"backbone.stage{i}.block{j}": BlockParams.from_store(
                store, f"backbone.stage{i}.block{j}", self.dtype)
            for i, depth in enumerate(cfg.depths) for j in range(depth)
        }
        self.caches = {}

    @classmethod
    def seeded(cls, cfg: ModelConfig | None = None, seed: int | None = None, dtype=np.float32):
        cfg = cfg or ModelConfig()
        return cls(cfg, init_weights(cfg, seed), dtype)

    def astype(self, dtype) -> "DehazeModel":
        return DehazeModel(self.cfg, self.store, dtype)

    def reset_caches(self) -> None:
        self.caches.clear()

    def estimate(self, image) -> AtmosphericParams:
        return estimate(np.asarray(image, dtype=self.dtype), self.estimator, self.cfg.q_a)

    def encode(self, image, atm: AtmosphericParams, use_cache: bool = True) -> np.ndarray:
        return backbone_forward(image, self.backbone_cfg, self.store, atm,
                                self.caches if use_cache else None, self.cfg,
                                self.dtype, self.blocks)

    def dehaze(self, image, use_cache: bool = True, trace: dict | None = None):
        return dehaze(image, self, use_cache, trace)
