"""Atmospheric parameter estimation from a hazy RGB image.

Pipeline per image: learned dark channel -> airlight from the top dark-channel
pixels -> fused global feature -> physical MLP producing (r, b, c_a) ->
transmission t = 1 - c_a * dark.

All tensors carry a batch axis; per-image quantities have a leading N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError


def _open_unit(x: np.ndarray) -> np.ndarray:
    """Clip into the open interval (0, 1); float rounding can saturate a sigmoid."""
    one = np.array(1.0, dtype=x.dtype)
    return np.clip(x, np.finfo(x.dtype).tiny, np.nextafter(one, 0))


@dataclass(frozen=True)
class EstimatorWeights:
    dark_conv5_w: np.ndarray
    dark_conv5_b: np.ndarray
    dark_conv3_w: np.ndarray
    dark_conv3_b: np.ndarray
    fuse_conv5_w: np.ndarray
    fuse_conv5_b: np.ndarray
    fuse_conv3_w: np.ndarray
    fuse_conv3_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def from_store(cls, store, dtype=np.float32) -> "EstimatorWeights":
        p = "estimator."
        names = {
            "dark_conv5_w": "dark.conv5.weight", "dark_conv5_b": "dark.conv5.bias",
            "dark_conv3_w": "dark.conv3.weight", "dark_conv3_b": "dark.conv3.bias",
            "fuse_conv5_w": "fuse.conv5.weight", "fuse_conv5_b": "fuse.conv5.bias",
            "fuse_conv3_w": "fuse.conv3.weight", "fuse_conv3_b": "fuse.conv3.bias",
            "fc1_w": "mlp.fc1.weight", "fc1_b": "mlp.fc1.bias",
            "fc2_w": "mlp.fc2.weight", "fc2_b": "mlp.fc2.bias",
            "head_w": "mlp.head.weight", "head_b": "mlp.head.bias",
        }
        return cls(**{k: np.asarray(store[p + v], dtype=dtype) for k, v in names.items()})

    @property
    def channels(self) -> int:
        """Width of the r and b vectors."""
        return (self.head_w.shape[0] - 1) // 2


@dataclass
class AtmosphericParams:
    dark_channel: np.ndarray        # (N, 1, H, W), values in (0, 1)
    atmospheric_light: np.ndarray   # (N, 3)
    r: np.ndarray                   # (N, C), positive
    b: np.ndarray                   # (N, C), in (-1, 1)
    c_a: np.ndarray                 # (N,) or (N, 1, H, W), in (0, 1)

    @property
    def transmission(self) -> np.ndarray:
        return transmission_map(self.dark_channel, self.c_a)

    @property
    def c_a_mean(self) -> float:
        return float(np.mean(np.asarray(self.c_a, dtype=np.float64)))

    def image(self, i: int) -> "AtmosphericParams":
        """Parameters of the i-th image, keeping a batch axis of one."""
        c_a = self.c_a[i:i + 1]
        return AtmosphericParams(self.dark_channel[i:i + 1], self.atmospheric_light[i:i + 1],
                                 self.r[i:i + 1], self.b[i:i + 1], c_a)


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an (N, 3, H, W) image, got shape {image.shape}")


def dark_channel_net(image, w: EstimatorWeights) -> np.ndarray:
    image = np.asarray(image)
    _check_image(image)
    h = nx.relu(nx.conv2d(image, w.dark_conv5_w, w.dark_conv5_b, padding=2))
    return _open_unit(nx.sigmoid(nx.conv2d(h, w.dark_conv3_w, w.dark_conv3_b, padding=1)))


def estimate_atmospheric_light(image, dark, q_a: float = 0.999) -> np.ndarray:
    """Mean RGB over pixels whose dark value reaches the q_a nearest-rank quantile."""
    image = np.asarray(image)
    dark = np.asarray(dark)
    _check_image(image)
    if dark.shape != (image.shape[0], 1) + image.shape[2:]:
        raise ShapeError(f"dark channel shape {dark.shape} does not match image {image.shape}")
    out = np.empty((image.shape[0], 3))
    for n in range(image.shape[0]):
        d = dark[n, 0]
        mask = d >= nx.quantile(d, q_a)
        out[n] = image[n][:, mask].astype(np.float64).mean(axis=1)
    return out.astype(image.dtype)


def fuse_features(image, dark, w: EstimatorWeights) -> np.ndarray:
    """Global feature vector f, shape (N, d)."""
    image = np.asarray(image)
    _check_image(image)
    x = np.concatenate([image, np.asarray(dark, dtype=image.dtype)], axis=1)
    if w.fuse_conv5_w.shape[1] != 4:
        raise ShapeError(f"fusion conv expects 4 input channels, weights have {w.fuse_conv5_w.shape[1]}")
    h = nx.leaky_relu(nx.conv2d(x, w.fuse_conv5_w, w.fuse_conv5_b, padding=2))
    h = nx.conv2d(h, w.fuse_conv3_w, w.fuse_conv3_b, padding=1)
    return nx.global_avg_pool(h)[:, :, 0, 0]


def physical_mlp(f, a, w: EstimatorWeights):
    """(f, A) -> (r, b, c_a) with r > 0, b in (-1, 1), c_a in (0, 1)."""
    f = np.asarray(f)
    a = np.asarray(a, dtype=f.dtype)
    if f.ndim == 1:
        f, a = f[None], a.reshape(1, -1)
    z = np.concatenate([f, a], axis=1)
    if z.shape[1] != w.fc1_w.shape[1]:
        raise ShapeError(f"physical MLP expects input length {w.fc1_w.shape[1]}, got {z.shape[1]}")
    h = nx.leaky_relu(nx.linear(z, w.fc1_w, w.fc1_b))
    h = nx.leaky_relu(nx.linear(h, w.fc2_w, w.fc2_b))
    out = nx.linear(h, w.head_w, w.head_b)
    c = w.channels
    r = np.maximum(nx.softplus(out[:, :c]), np.finfo(out.dtype).tiny)
    b = np.clip(nx.tanh(out[:, c:2 * c]), -np.nextafter(out.dtype.type(1), 0),
                np.nextafter(out.dtype.type(1), 0))
    c_a = _open_unit(nx.sigmoid(out[:, 2 * c]))
    return r, b, c_a


def transmission_map(dark, c_a) -> np.ndarray:
    """t = 1 - c_a * dark; c_a may be a scalar, per-image (N,), or a map."""
    dark = np.asarray(dark)
    c = np.asarray(c_a, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(-1, 1, 1, 1)
    return (1.0 - c * dark.astype(np.float64)).astype(dark.dtype)


def estimate(image, w: EstimatorWeights, q_a: float = 0.999) -> AtmosphericParams:
    image = np.asarray(image)
    dark = dark_channel_net(image, w)
    a = estimate_atmospheric_light(image, dark, q_a)
    f = fuse_features(image, dark, w)
    r, b, c_a = physical_mlp(f, a, w)
    return AtmosphericParams(dark, a, r, b, c_a)
