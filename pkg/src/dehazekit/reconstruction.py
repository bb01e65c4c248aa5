"""Multi-scale reconstruction: refine encoder features, upsample them through the
scattering model, add the input image back."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError


@dataclass(frozen=True)
class ReconWeights:
    conv1x1_w: np.ndarray
    conv1x1_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    dw_w: np.ndarray
    dw_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    bn_eps: float = 1e-5

    @classmethod
    def from_store(cls, store, dtype=np.float32, bn_eps: float = 1e-5) -> "ReconWeights":
        names = {
            "conv1x1_w": "conv1x1.weight", "conv1x1_b": "conv1x1.bias",
            "bn_gamma": "bn.gamma", "bn_beta": "bn.beta",
            "bn_mean": "bn.running_mean", "bn_var": "bn.running_var",
            "dw_w": "dw.weight", "dw_b": "dw.bias",
            "out_w": "out.weight", "out_b": "out.bias",
        }
        return cls(**{k: np.asarray(store["recon." + v], dtype=dtype) for k, v in names.items()},
                   bn_eps=bn_eps)

    def __post_init__(self):
        c = self.conv1x1_w.shape[0]
        for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            arr = getattr(self, name)
            if arr.shape != (c,):
                raise ShapeError(f"{name} must have length {c}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.bn_var + self.bn_eps <= 0):
            raise ValueError("batch-norm variance must be positive after eps")


def batch_norm(x, w: ReconWeights) -> np.ndarray:
    x = np.asarray(x)
    scale = w.bn_gamma.astype(np.float64) / np.sqrt(w.bn_var.astype(np.float64) + w.bn_eps)
    shift = w.bn_beta.astype(np.float64) - w.bn_mean.astype(np.float64) * scale
    return (x.astype(np.float64) * scale[None, :, None, None]
            + shift[None, :, None, None]).astype(x.dtype)


def refine_features(f_d, w: ReconWeights) -> np.ndarray:
    """DWConv3x3(ReLU(BN(Conv1x1(F_d))))."""
    f_d = np.asarray(f_d)
    if f_d.ndim != 4:
        raise ShapeError(f"features must be rank 4, got {f_d.shape}")
    h = nx.conv2d(f_d, w.conv1x1_w, w.conv1x1_b)
    h = nx.relu(batch_norm(h, w))
    return nx.depthwise_conv2d(h, w.dw_w, padding=1, bias=w.dw_b)


def expand_airlight(a, channels: int) -> np.ndarray:
    """(N, 3) airlight -> (N, channels): RGB on the first three, mean(A) beyond."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    extra = np.repeat(a.mean(axis=1, keepdims=True), max(channels - 3, 0), axis=1)
    return np.concatenate([a, extra], axis=1)[:, :channels]


def physics_upsample(f_refined, t, a, target_h: int, target_w: int) -> np.ndarray:
    """Interp(F) * t_up + A_up * (1 - t_up) at the target extents."""
    f_refined = np.asarray(f_refined)
    t = np.asarray(t)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target extents must be positive, got {target_h}x{target_w}")
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"transmission must be (N, 1, H, W), got {t.shape}")
    f_up = nx.bilinear_resize(f_refined, target_h, target_w).astype(np.float64)
    t_up = nx.bilinear_resize(t, target_h, target_w).astype(np.float64)
    a_up = expand_airlight(a, f_refined.shape[1])[:, :, None, None]
    return (f_up * t_up + a_up * (1.0 - t_up)).astype(f_refined.dtype)


def compose_output(f_up, image, w: ReconWeights, clamp: bool = False) -> np.ndarray:
    """Conv3x3(F_up) + I. The clamp to [0, 1] is for emitted images only."""
    f_up, image = np.asarray(f_up), np.asarray(image)
    if f_up.shape[2:] != image.shape[2:]:
        raise ShapeError(f"extent mismatch: features {f_up.shape[2:]} vs image {image.shape[2:]}")
    if w.out_w.shape[0] != image.shape[1]:
        raise ShapeError(f"output conv emits {w.out_w.shape[0]} channels, image has {image.shape[1]}")
    j = (nx.conv2d(f_up, w.out_w, w.out_b, padding=1).astype(np.float64)
         + image.astype(np.float64)).astype(image.dtype)
    return np.clip(j, 0.0, 1.0) if clamp else j


def dehaze(image, model, use_cache: bool = True, trace: dict | None = None):
    """Full pipeline. Returns (J_hat, atmospheric parameters); J_hat is unclamped.

    `trace`, when given, receives the intermediate dark channel, transmission
    and upsampled features.
    """
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an (N, 3, H, W) image, got {image.shape}")
    h, w = image.shape[2:]
    atm = model.estimate(image)
    f_d = model.encode(image, atm, use_cache)
    t = atm.transmission
    f_up = physics_upsample(refine_features(f_d, model.recon), t, atm.atmospheric_light, h, w)
    j_hat = compose_output(f_up, image, model.recon)
    if trace is not None:
        trace.update(dark=atm.dark_channel, transmission=t, f_up=f_up)
    return j_hat, atm


def dehaze_tiled(image, model, tile: int = 256, overlap: int = 32) -> np.ndarray:
    """Split a large image into overlapping tiles, dehaze each, average the overlaps.

    Tiles run stateless (fresh caches), so the stitched result does not
    depend on tile order.
    """
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"tiled dehazing takes a single (1, 3, H, W) image, got {image.shape}")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must lie in [0, tile), got {overlap}")
    _, _, h, w = image.shape
    step = tile - overlap

    def starts(n):
        if n <= tile:
            return [0]
        s = list(range(0, n - tile, step)) + [n - tile]
        return sorted(set(s))

    acc = np.zeros(image.shape)
    cnt = np.zeros((1, 1, h, w))
    for y in starts(h):
        for x in starts(w):
            patch = image[:, :, y:y + tile, x:x + tile]
            j, _ = dehaze(patch, model, use_cache=False)
            acc[:, :, y:y + tile, x:x + tile] += j
            cnt[:, :, y:y + tile, x:x + tile] += 1
    return (acc / cnt).astype(image.dtype)
