"""PSNR, SSIM and the weighted L1 / MSE / SSIM training loss."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import LossWeights
from .numerics import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"extent mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def _as_planes(x: np.ndarray, per_channel: bool) -> np.ndarray:
    """Reduce to (..., H, W) grayscale planes (or per-channel planes)."""
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"ssim expects (H, W), (C, H, W) or (N, C, H, W), got {x.shape}")
    if per_channel:
        return x.reshape(-1, *x.shape[2:])
    return x.mean(axis=1)


def ssim(x, y, peak: float = 1.0, per_channel: bool = False) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), mean over valid windows.

    RGB inputs are compared as their channel-mean grayscale unless
    `per_channel` is set, in which case the per-plane SSIMs are averaged.
    """
    x, y = _pair(x, y)
    px, py = _as_planes(x, per_channel), _as_planes(y, per_channel)
    if px.shape[-1] < SSIM_WINDOW or px.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"image {px.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_kernel1d()
    mx, my = _filter_valid(px, g), _filter_valid(py, g)
    vx = _filter_valid(px * px, g) - mx * mx
    vy = _filter_valid(py * py, g) - my * my
    cxy = _filter_valid(px * py, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


def combined_loss(pred, target, w: LossWeights = LossWeights()) -> float:
    p, t = _pair(pred, target)
    d = p - t
    total = w.w_l1 * float(np.mean(np.abs(d))) + w.w_mse * float(np.mean(d * d))
    if w.w_ssim:
        total += w.w_ssim * (1.0 - ssim(p, t))
    return total
