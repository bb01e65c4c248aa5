"""Parameter-aware windowed transformer block and the 16x encoder backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import (
    KVCache,
    WindowGeometry,
    adaptive_layer_norm,
    cached_window_attention,
    compute_window_size,
    relative_position_bias,
    window_geometry,
    window_merge,
    window_partition,
)
from .config import ModelConfig
from .estimator import AtmosphericParams

DOWNSAMPLE = 16


@dataclass(frozen=True)
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    rel_pos: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    drop_path_rate: float = 0.0

    _NAMES = {
        "ln1_gamma": "ln1.gamma", "ln1_beta": "ln1.beta",
        "qkv_w": "attn.qkv.weight", "qkv_b": "attn.qkv.bias",
        "proj_w": "attn.proj.weight", "proj_b": "attn.proj.bias",
        "rel_pos": "attn.rel_pos",
        "gamma1": "gamma1", "beta1": "beta1",
        "ln2_gamma": "ln2.gamma", "ln2_beta": "ln2.beta",
        "fc1_w": "mlp.fc1.weight", "fc1_b": "mlp.fc1.bias",
        "fc2_w": "mlp.fc2.weight", "fc2_b": "mlp.fc2.bias",
        "gamma2": "gamma2", "beta2": "beta2",
    }

    @classmethod
    def from_store(cls, store, prefix: str, dtype=np.float32) -> "BlockParams":
        return cls(**{k: np.asarray(store[f"{prefix}.{v}"], dtype=dtype)
                      for k, v in cls._NAMES.items()})

    @property
    def channels(self) -> int:
        return self.gamma1.shape[0]

    def __post_init__(self):
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        c = self.channels
        for name in ("gamma2", "beta1", "beta2", "ln1_gamma", "ln2_gamma"):
            if getattr(self, name).shape != (c,):
                raise nx.ShapeError(f"{name} must have length {c}")


def stage_vector(v, channels: int) -> np.ndarray:
    """Fit per-channel atmospheric vectors to a stage width by tiling then truncating."""
    v = np.asarray(v)
    v2 = v.reshape(-1, v.shape[-1])
    reps = -(-channels // v2.shape[1])
    return np.tile(v2, (1, reps))[:, :channels]


def block_geometry(h: int, w: int, cfg: ModelConfig, batch: int = 1) -> WindowGeometry:
    return window_geometry(h, w, compute_window_size(h, w, cfg.alpha, cfg.beta, cfg.tau), batch)


def _mlp(x, p: BlockParams) -> np.ndarray:
    # x: (N, C, H, W) -> channel-last dense layers
    t = x.transpose(0, 2, 3, 1)
    t = nx.gelu(nx.linear(t, p.fc1_w, p.fc1_b))
    t = nx.linear(t, p.fc2_w, p.fc2_b)
    return np.ascontiguousarray(t.transpose(0, 3, 1, 2))


def _channel(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(1, -1, 1, 1)


def pa_stb_forward(x, p: BlockParams, atm: AtmosphericParams, cache: KVCache | None,
                   cfg: ModelConfig, return_geometry: bool = False):
    """One block: adaptive LN -> cached window attention -> scaled residual -> MLP.

    The attention reads the cache as it stood before this call, then the
    call's keys/values (mean-pooled over windows) are pushed into it. Pass
    ``cache=None`` for stateless evaluation, equivalent to a fresh cache.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    if c != p.channels:
        raise nx.ShapeError(f"block expects {p.channels} channels, got {c}")
    r = stage_vector(atm.r, c)
    b = stage_vector(atm.b, c)
    xn = adaptive_layer_norm(x, r, b, p.ln1_gamma, p.ln1_beta, cfg.ln_eps)

    geo = block_geometry(h, w, cfg, n)
    tokens, geo = window_partition(xn, geo.w_adapt, geo.w_base)
    qkv = nx.linear(tokens, p.qkv_w, p.qkv_b)
    q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
    bias = relative_position_bias(p.rel_pos, geo.w_adapt)
    attn = cached_window_attention(q, k, v, cache, bias, heads=cfg.heads)
    if cache is not None:
        if cache.segment_len is None:
            cache.segment_len = k.shape[1]
        k_t = k.astype(np.float64).mean(axis=0).astype(k.dtype)
        v_t = v.astype(np.float64).mean(axis=0).astype(v.dtype)
        cache.update(k_t, v_t, atm.c_a_mean)
    attn = nx.linear(attn, p.proj_w, p.proj_b)
    x_attn = window_merge(attn, geo)

    # drop-path is the identity at inference
    dt = x.dtype
    x_out = (x.astype(np.float64) + _channel(p.gamma1) * x_attn + _channel(p.beta1)).astype(dt)
    y = _mlp(nx.layer_norm(x_out, p.ln2_gamma, p.ln2_beta, cfg.ln_eps), p)
    x_final = (x_out.astype(np.float64) + _channel(p.gamma2) * y + _channel(p.beta2)).astype(dt)
    return (x_final, geo) if return_geometry else x_final


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 32
    depths: tuple[int, ...] = (2, 2, 2, 2)
    factors: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        if int(np.prod(self.factors)) != DOWNSAMPLE:
            raise ValueError(f"stage downsample factors must multiply to {DOWNSAMPLE}")
        if len(self.factors) != len(self.depths):
            raise ValueError("one downsample factor per stage is required")
        if any(f != 2 for f in self.factors):
            raise ValueError("only stride-2 stages are supported")

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "BackboneConfig":
        return cls(cfg.channels, cfg.depths)

    @property
    def out_channels(self) -> int:
        return self.channels * 2 ** (len(self.depths) - 1)


def backbone_forward(x, bcfg: BackboneConfig, store, atm: AtmosphericParams,
                     caches: dict[str, KVCache] | None, cfg: ModelConfig,
                     dtype=np.float32, params: dict | None = None) -> np.ndarray:
    """Encode (N, 3, H, W) to (N, C_out, ceil(H/16), ceil(W/16)).

    Inputs are edge-padded to multiples of 16. `caches` maps block prefixes
    to their KVCache; missing entries are created on first use. `params`
    optionally supplies pre-built BlockParams keyed the same way.
    """
    x = np.asarray(x, dtype=dtype)
    _, _, h, w = x.shape
    ph, pw = -h % DOWNSAMPLE, -w % DOWNSAMPLE
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    for i, depth in enumerate(bcfg.depths):
        s = f"backbone.stage{i}"
        x = nx.conv2d(x, np.asarray(store[f"{s}.down.weight"], dtype=dtype),
                      np.asarray(store[f"{s}.down.bias"], dtype=dtype), stride=2, padding=1)
        for j in range(depth):
            prefix = f"{s}.block{j}"
            p = params[prefix] if params and prefix in params else \
                BlockParams.from_store(store, prefix, dtype)
            cache = None
            if caches is not None:
                cache = caches.get(prefix)
                if cache is None:
                    cache = caches[prefix] = new_block_cache(x.shape[2], x.shape[3], p.channels, cfg)
            x = pa_stb_forward(x, p, atm, cache, cfg)
    return x


def new_block_cache(h: int, w: int, channels: int, cfg: ModelConfig) -> KVCache:
    w_base = compute_window_size(h, w, cfg.alpha, cfg.beta, cfg.tau)
    max_len = cfg.max_cache_len if cfg.max_cache_len is not None else 4 * w_base * w_base
    return KVCache(channels, max_len, cfg.eta)
