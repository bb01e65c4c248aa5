"""Dense tensor kernels on NCHW numpy arrays.

Every kernel is pure: inputs are never modified. Results keep the input's
floating dtype (float32 by default, float64 when callers ask for
oracle-grade precision). Reductions accumulate in float64.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent."""


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return `x` as a C-contiguous float array (float32 unless already float64)."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


def _out_dtype(*arrays) -> type:
    return np.float64 if any(np.asarray(a).dtype == np.float64 for a in arrays) else np.float32


def _require_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, C, H, W), got shape {x.shape}")


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation.

    Parameters
    ----------
    x : array, shape (N, C_in, H, W)
    kernel : array, shape (C_out, C_in, kh, kw)
    bias : array of shape (C_out,) or None
    stride, padding : int
        Zero padding is applied symmetrically on both spatial axes.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _require_rank4(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4 (C_out, C_in, kh, kw), got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d in-channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None and np.shape(bias) != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {np.shape(bias)}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    dtype = _out_dtype(x, kernel)

    xp = x.astype(np.float64, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, kernel.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def depthwise_conv2d(x, kernel, padding: int = 0, bias=None) -> np.ndarray:
    """Per-channel convolution; kernel shape (C, 1, kh, kw), stride 1."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _require_rank4(x, "depthwise_conv2d input")
    c = x.shape[1]
    if kernel.ndim != 4 or kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ShapeError(
            f"depthwise kernel must have shape ({c}, 1, kh, kw) for {c} channels, got {kernel.shape}"
        )
    if bias is not None and np.shape(bias) != (c,):
        raise ShapeError(f"depthwise bias must have shape ({c},), got {np.shape(bias)}")
    dtype = _out_dtype(x, kernel)
    kh, kw = kernel.shape[2:]
    xp = x.astype(np.float64, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    k = kernel.astype(np.float64)
    out = np.zeros((x.shape[0], c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + ho, j:j + wo] * k[None, :, 0, i, j, None, None]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out.astype(dtype)


def _linear_weights(n_in: int, n_out: int, align_corners: bool):
    if align_corners:
        if n_out == 1:
            src = np.zeros(1)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
    lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """Bilinear resampling of the two trailing axes.

    ``align_corners=False`` uses half-pixel centres with edge clamping;
    ``align_corners=True`` maps the corner samples onto the corner pixels.
    """
    x = np.asarray(x)
    _require_rank4(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if h == 0 or w == 0:
        raise ShapeError(f"cannot resize an empty input of extent {h}x{w}")
    if (h, w) == (out_h, out_w):
        return x.copy()
    dtype = _out_dtype(x)
    xd = x.astype(np.float64, copy=False)

    lo, hi, fr = _linear_weights(h, out_h, align_corners)
    rows = xd[:, :, lo, :] * (1.0 - fr)[:, None] + xd[:, :, hi, :] * fr[:, None]
    lo, hi, fr = _linear_weights(w, out_w, align_corners)
    out = rows[:, :, :, lo] * (1.0 - fr) + rows[:, :, :, hi] * fr
    return out.astype(dtype)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the channel axis independently at every spatial location."""
    x = np.asarray(x)
    _require_rank4(x, "layer_norm input")
    c = x.shape[1]
    if np.shape(gamma) != (c,) or np.shape(beta) != (c,):
        raise ShapeError(
            f"layer_norm gamma/beta must have length {c}, got {np.shape(gamma)} and {np.shape(beta)}"
        )
    dtype = _out_dtype(x)
    xd = x.astype(np.float64, copy=False)
    mean = xd.mean(axis=1, keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=1, keepdims=True)
    y = (xd - mean) / np.sqrt(var + eps)
    y = y * np.asarray(gamma, dtype=np.float64)[None, :, None, None]
    y = y + np.asarray(beta, dtype=np.float64)[None, :, None, None]
    return y.astype(dtype)


def softmax_lastdim(x) -> np.ndarray:
    x = np.asarray(x)
    dtype = _out_dtype(x)
    xd = x.astype(np.float64, copy=False)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(dtype)


def quantile(values, q: float) -> float:
    """Nearest-rank quantile: element ``ceil(q*n) - 1`` of the ascending sort."""
    v = np.asarray(values).ravel()
    n = v.size
    if n == 0:
        raise ValueError("quantile of an empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    idx = min(max(math.ceil(q * n) - 1, 0), n - 1)
    return float(np.partition(v, idx)[idx])


def global_avg_pool(x) -> np.ndarray:
    x = np.asarray(x)
    _require_rank4(x, "global_avg_pool input")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError(f"global_avg_pool needs nonzero spatial extent, got {x.shape[2:]}")
    return x.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(_out_dtype(x))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    xd = x.astype(np.float64, copy=False)
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.astype(_out_dtype(x))


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(_out_dtype(x))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x >= 0, x, x * slope).astype(_out_dtype(x))


def tanh(x) -> np.ndarray:
    x = np.asarray(x)
    return np.tanh(x.astype(np.float64)).astype(_out_dtype(x))


def softplus(x) -> np.ndarray:
    x = np.asarray(x)
    xd = x.astype(np.float64, copy=False)
    return (np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))).astype(_out_dtype(x))


def gelu(x) -> np.ndarray:
    x = np.asarray(x)
    xd = x.astype(np.float64, copy=False)
    return (0.5 * xd * (1.0 + erf(xd / math.sqrt(2.0)))).astype(_out_dtype(x))


def min_pool2d(x, window: int) -> np.ndarray:
    """Sliding minimum with same-extent output (edge-replicated borders)."""
    x = np.asarray(x)
    _require_rank4(x, "min_pool2d input")
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    h, w = x.shape[2:]
    if window > h and window > w:
        raise ShapeError(f"window {window} larger than both extents {h}x{w}")
    before, after = (window - 1) // 2, window // 2
    xp = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)), mode="edge")
    return sliding_window_view(xp, (window, window), axis=(2, 3)).min(axis=(4, 5)).astype(x.dtype)


def linear(x, weight, bias=None) -> np.ndarray:
    """Dense layer over the last axis; weight shape (out, in)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got {x.shape[-1]}")
    out = x.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out.astype(_out_dtype(x, weight))
