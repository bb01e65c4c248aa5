"""Adaptive normalisation, dynamic windows and the haze-guided KV cache."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError

UNIT_EPS = 1e-6
ATTN_CHUNK_ELEMS = 1 << 24


def unit_normalize(v, eps: float = UNIT_EPS) -> np.ndarray:
    v = np.asarray(v)
    vd = v.astype(np.float64)
    norm = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    return (vd / (norm + eps)).astype(v.dtype)


def adaptive_layer_norm(x, r, b, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """LayerNorm(x * N(r) + N(b)) with N the unit-L2 projection.

    `r` and `b` are per-channel, either (C,) shared by the batch or (N, C).
    """
    x = np.asarray(x)
    r, b = np.asarray(r), np.asarray(b)
    c = x.shape[1]
    if r.shape[-1] != c or b.shape[-1] != c:
        raise ShapeError(f"r/b must have {c} channels, got {r.shape} and {b.shape}")
    nr = unit_normalize(r).astype(np.float64).reshape(-1, c, 1, 1)
    nb = unit_normalize(b).astype(np.float64).reshape(-1, c, 1, 1)
    y = (x.astype(np.float64) * nr + nb).astype(x.dtype)
    return nx.layer_norm(y, gamma, beta, eps)


def compute_window_size(h: int, w: int, alpha: int = 8, beta: int = 4, tau: int = 1024) -> int:
    m = min(h, w)
    return max(m // alpha + (beta if m > tau else 0), 1)


@dataclass(frozen=True)
class WindowGeometry:
    w_base: int
    w_adapt: int
    height: int
    width: int
    pad_h: int
    pad_w: int
    batch: int = 1

    @property
    def grid(self) -> tuple[int, int]:
        return ((self.height + self.pad_h) // self.w_adapt,
                (self.width + self.pad_w) // self.w_adapt)

    @property
    def num_windows(self) -> int:
        gh, gw = self.grid
        return self.batch * gh * gw


def window_geometry(h: int, w: int, w_base: int, batch: int = 1) -> WindowGeometry:
    wa = min(w_base, h, w)
    return WindowGeometry(w_base, wa, h, w, -h % wa, -w % wa, batch)


def window_partition(x, w: int, w_base: int | None = None):
    """(N, C, H, W) -> (N * nH * nW, w*w, C) tokens, zero-padding bottom/right."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"window_partition needs a rank-4 tensor, got {x.shape}")
    if w < 1:
        raise ValueError(f"window size must be positive, got {w}")
    n, c, h, wd = x.shape
    geo = WindowGeometry(w if w_base is None else w_base, w, h, wd, -h % w, -wd % w, n)
    if geo.pad_h or geo.pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (0, geo.pad_h), (0, geo.pad_w)))
    gh, gw = geo.grid
    t = x.reshape(n, c, gh, w, gw, w).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(t.reshape(n * gh * gw, w * w, c)), geo


def window_merge(windows, geo: WindowGeometry) -> np.ndarray:
    windows = np.asarray(windows)
    w = geo.w_adapt
    gh, gw = geo.grid
    if windows.ndim != 3 or windows.shape[:2] != (geo.num_windows, w * w):
        raise ShapeError(
            f"windows of shape {windows.shape} do not match geometry "
            f"({geo.num_windows}, {w * w}, C)"
        )
    c = windows.shape[2]
    x = windows.reshape(geo.batch, gh, gw, w, w, c).transpose(0, 5, 1, 3, 2, 4)
    x = x.reshape(geo.batch, c, gh * w, gw * w)
    return np.ascontiguousarray(x[:, :, :geo.height, :geo.width])


def relative_position_bias(table, w: int) -> np.ndarray:
    """Materialise a (heads, w*w, w*w) bias from a (heads, 2R-1, 2R-1) table.

    Offsets beyond the table's range are clipped to its border.
    """
    table = np.asarray(table)
    if table.ndim == 2:
        table = table[None]
    span = table.shape[-1]
    reach = (span - 1) // 2
    ys, xs = np.divmod(np.arange(w * w), w)
    dy = np.clip(ys[:, None] - ys[None, :], -reach, reach) + reach
    dx = np.clip(xs[:, None] - xs[None, :], -reach, reach) + reach
    return table[:, dy, dx]


def retention_ratio(c_a_mean: float, eta: float, cache_len: int = 0) -> tuple[float, int]:
    gamma = 1.0 - c_a_mean * eta
    return gamma, math.floor(gamma * cache_len)


def align_kv(seq, target_len: int) -> np.ndarray:
    """Linearly resample an (L, d) sequence to (target_len, d)."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1 or target_len < 1:
        raise ShapeError(f"cannot align sequence of shape {seq.shape} to length {target_len}")
    if seq.shape[0] == target_len:
        return seq.copy()
    as_img = seq.T[None, :, None, :]
    return nx.bilinear_resize(as_img, 1, target_len, align_corners=True)[0, :, 0, :].T.copy()


@dataclass(frozen=True)
class CacheUpdate:
    """Telemetry of a single cache update."""

    gamma: float
    n_keep: int
    evicted: int
    capped: int
    aligned: bool
    length: int


@dataclass
class KVCache:
    """Persistent key/value sequences for one attention block.

    ``segment_len`` is the token length incoming segments are aligned to
    when the window size changes; it is pinned by the first block call and
    left unset for raw cache use.
    """

    dim: int
    max_len: int | None = None
    eta: float = 0.5
    segment_len: int | None = None
    keys: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    history: list[CacheUpdate] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"cache dim must be positive, got {self.dim}")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError(f"max_len must be positive, got {self.max_len}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        self.keys = np.zeros((0, self.dim), dtype=np.float32)
        self.values = np.zeros((0, self.dim), dtype=np.float32)

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def nbytes(self) -> int:
        return len(self) * self.dim * 4 * 2

    def reset(self) -> None:
        self.keys = self.keys[:0]
        self.values = self.values[:0]
        self.segment_len = None
        self.history.clear()

    def update(self, k_t, v_t, c_a_mean: float) -> CacheUpdate:
        k_t, v_t = np.asarray(k_t), np.asarray(v_t)
        if k_t.shape != v_t.shape or k_t.ndim != 2:
            raise ShapeError(f"keys {k_t.shape} and values {v_t.shape} must be equal (L, d) arrays")
        gamma, n_keep = retention_ratio(c_a_mean, self.eta, len(self))
        aligned = False
        if len(self) and self.segment_len is not None and k_t.shape[0] != self.segment_len:
            k_t, v_t = align_kv(k_t, self.segment_len), align_kv(v_t, self.segment_len)
            aligned = True
        if k_t.shape[1] != self.dim:
            raise ShapeError(f"incoming dim {k_t.shape[1]} does not match cache dim {self.dim}")
        dtype = np.result_type(self.keys.dtype, k_t.dtype)
        keys = np.concatenate([self.keys[:n_keep], k_t]).astype(dtype, copy=False)
        values = np.concatenate([self.values[:n_keep], v_t]).astype(dtype, copy=False)
        capped = 0
        if self.max_len is not None and len(keys) > self.max_len:
            capped = len(keys) - self.max_len
            keys, values = keys[capped:], values[capped:]
        rec = CacheUpdate(gamma, n_keep, len(self) - n_keep, capped, aligned, len(keys))
        self.keys, self.values = keys, values
        self.history.append(rec)
        return rec


def update_cache(cache: KVCache, k_t, v_t, c_a_mean: float) -> KVCache:
    cache.update(k_t, v_t, c_a_mean)
    return cache


def cached_window_attention(q, k, v, cache: KVCache | None = None, bias=None,
                            d: int | None = None, heads: int = 1) -> np.ndarray:
    """Softmax(Q [Kc; K]^T / sqrt(d) + [0 | B]) [Vc; V] inside every window.

    q, k, v: (num_windows, T, D). The cached sequence is shared by all windows
    and receives no positional bias. `bias` is (T, T) or (heads, T, T).
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 3 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"q, k, v must share a (windows, T, D) shape: {q.shape}, {k.shape}, {v.shape}")
    nw, t, dim = q.shape
    if dim % heads:
        raise ShapeError(f"{heads} heads do not divide feature dim {dim}")
    dh = dim // heads
    d = dh if d is None else d
    kc = np.zeros((0, dim)) if cache is None else cache.keys
    vc = np.zeros((0, dim)) if cache is None else cache.values
    if kc.shape[1] != dim:
        raise ShapeError(f"cache dim {kc.shape[1]} does not match token dim {dim}")
    lc = kc.shape[0]
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.ndim == 2:
            bias = bias[None]
        if bias.shape[1:] != (t, t) or bias.shape[0] not in (1, heads):
            raise ShapeError(f"bias shape {bias.shape} does not fit {heads} heads x ({t}, {t})")

    qd = q.astype(np.float64).reshape(nw, t, heads, dh).transpose(2, 0, 1, 3)
    kd = k.astype(np.float64).reshape(nw, t, heads, dh).transpose(2, 0, 1, 3)
    vd = v.astype(np.float64).reshape(nw, t, heads, dh).transpose(2, 0, 1, 3)
    kcd = kc.astype(np.float64).reshape(lc, heads, dh).transpose(1, 0, 2)
    vcd = vc.astype(np.float64).reshape(lc, heads, dh).transpose(1, 0, 2)

    scale = 1.0 / math.sqrt(d)
    out = np.empty((heads, nw, t, dh))
    # windows are independent; chunk them to bound the logit buffer
    step = max(1, ATTN_CHUNK_ELEMS // (heads * t * (t + lc)))
    for s in range(0, nw, step):
        qs, ks, vs = qd[:, s:s + step], kd[:, s:s + step], vd[:, s:s + step]
        cur = qs @ ks.transpose(0, 1, 3, 2) * scale            # (h, n, t, t)
        if bias is not None:
            cur = cur + bias[:, None]
        hist = np.einsum("hntd,hld->hntl", qs, kcd) * scale     # (h, n, t, lc)
        p = nx.softmax_lastdim(np.concatenate([hist, cur], axis=-1))
        out[:, s:s + step] = np.einsum("hntl,hld->hntd", p[..., :lc], vcd) + p[..., lc:] @ vs
    return out.transpose(1, 2, 0, 3).reshape(nw, t, dim).astype(nx._out_dtype(q))
