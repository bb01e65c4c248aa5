"""Atmospheric scattering model: I = J * t + A * (1 - t).

Transmission maps are single-channel (N, 1, H, W) and broadcast over the
colour channels; atmospheric light is an RGB triple broadcast over space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, as_tensor, min_pool2d

T_MIN = 0.1


def _airlight(a, dtype) -> np.ndarray:
    """Shape an RGB triple (or a per-image (N, 3) array) for NCHW broadcasting."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape == (3,):
        return a.reshape(1, 3, 1, 1).astype(dtype)
    if a.ndim == 2 and a.shape[1] == 3:
        return a.reshape(-1, 3, 1, 1).astype(dtype)
    raise ShapeError(f"atmospheric light must have shape (3,) or (N, 3), got {a.shape}")


def _check_pair(image: np.ndarray, t: np.ndarray) -> None:
    if image.ndim != 4 or t.ndim != 4:
        raise ShapeError(f"expected rank-4 tensors, got {image.shape} and {t.shape}")
    if t.shape[1] != 1:
        raise ShapeError(f"transmission must be single-channel, got {t.shape[1]} channels")
    if image.shape[2:] != t.shape[2:]:
        raise ShapeError(f"extent mismatch: image {image.shape[2:]} vs transmission {t.shape[2:]}")


@dataclass
class HazeScene:
    clean: np.ndarray
    transmission: np.ndarray
    atmospheric_light: tuple[float, float, float]
    t_min: float = T_MIN

    def __post_init__(self):
        self.clean = as_tensor(self.clean)
        if self.clean.ndim == 3:
            self.clean = self.clean[None]
        t = as_tensor(self.transmission)
        if t.ndim == 2:
            t = t[None, None]
        elif t.ndim == 3:
            t = t[None]
        if self.t_min <= 0:
            raise ValueError(f"t_min must be positive, got {self.t_min}")
        self.transmission = np.clip(t, self.t_min, 1.0).astype(t.dtype)
        _check_pair(self.clean, self.transmission)
        self.atmospheric_light = tuple(float(v) for v in self.atmospheric_light)


def synthesize_haze(scene: HazeScene) -> np.ndarray:
    j, t = scene.clean, scene.transmission
    _check_pair(j, t)
    a = _airlight(scene.atmospheric_light, np.float64)
    td = t.astype(np.float64)
    out = j.astype(np.float64) * td + a * (1.0 - td)
    return np.clip(out, 0.0, 1.0).astype(j.dtype)


def invert_haze(hazy, transmission, atmospheric_light, t_min: float = T_MIN) -> np.ndarray:
    """Recover scene radiance with the transmission floored at `t_min`."""
    if t_min <= 0:
        raise ValueError(f"t_min must be positive, got {t_min}")
    hazy = np.asarray(hazy)
    t = np.asarray(transmission)
    _check_pair(hazy, t)
    a = _airlight(atmospheric_light, np.float64)
    tf = np.maximum(t.astype(np.float64), t_min)
    j = (hazy.astype(np.float64) - a * (1.0 - tf)) / tf
    return np.clip(j, 0.0, 1.0).astype(hazy.dtype)


def estimate_scene_reflectance(hazy, transmission_hat, atmospheric_light, t_min: float = T_MIN):
    return invert_haze(hazy, transmission_hat, atmospheric_light, t_min)


def classical_dark_channel(image, patch: int = 15) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"dark channel needs an (N, 3, H, W) image, got {image.shape}")
    return min_pool2d(image.min(axis=1, keepdims=True), patch)
