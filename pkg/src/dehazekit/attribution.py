"""Physics-aware attribution maps.

The map integrates, along a straight path from a hazed baseline to the
input, the elementwise product of two input gradients: that of the
transmission-estimation loss and that of the reconstruction loss. Gradients
come from central finite differences unless a provider is supplied.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimator import AtmosphericParams
from .haze import estimate_scene_reflectance
from .numerics import ShapeError

FD_CHUNK = 96


@dataclass(frozen=True)
class PathConfig:
    steps: int = 32
    lam: float = 1.0
    t_mid: float = 0.7
    fd_epsilon: float = 1e-3
    raw_baseline: bool = False

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 < self.t_mid < 1.0:
            raise ValueError(f"t_mid must lie in (0, 1), got {self.t_mid}")
        if not 1e-5 <= self.fd_epsilon <= 1e-2:
            raise ValueError(f"fd_epsilon must lie in [1e-5, 1e-2], got {self.fd_epsilon}")


@dataclass
class AttributionMap:
    map: np.ndarray                  # (1, 1, H, W)
    path_meta: dict = field(default_factory=dict)


def make_baseline(image, atm: AtmosphericParams, cfg: PathConfig, t_min: float = 0.1):
    """A * (1 - t_mid) + R_scene * t_mid, clamped to [0, 1].

    With ``cfg.raw_baseline`` the reflectance term is added unscaled.
    """
    image = np.asarray(image)
    a = np.asarray(atm.atmospheric_light, dtype=np.float64).reshape(-1, 3, 1, 1)
    r_scene = estimate_scene_reflectance(image, atm.transmission, atm.atmospheric_light, t_min)
    scale = 1.0 if cfg.raw_baseline else cfg.t_mid
    base = a * (1.0 - cfg.t_mid) + r_scene.astype(np.float64) * scale
    return np.clip(base, 0.0, 1.0).astype(image.dtype)


def path_point(base, image, alpha: float) -> np.ndarray:
    base, image = np.asarray(base), np.asarray(image)
    if alpha == 0:
        return base.copy()
    if alpha == 1:
        return image.copy()
    return (base.astype(np.float64) + alpha * (image.astype(np.float64) - base)).astype(image.dtype)


def _index(i: int, shape) -> tuple[int, ...]:
    return tuple(int(v) for v in np.unravel_index(i, shape))


def grad_fd(fn: Callable, x, fd_epsilon: float = 1e-3, batched: bool = False,
            chunk: int = FD_CHUNK) -> np.ndarray:
    """Central-difference gradient of a scalar function of an image.

    With ``batched=True``, `fn` maps a stack (B, *x.shape) of inputs to B
    values (or to a (B, K) array of K functions, giving K gradients).
    """
    x = np.asarray(x)
    n = x.size
    flat = x.reshape(-1)
    if not batched:
        grad = np.empty(n)
        for i in range(n):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += fd_epsilon
            xm[i] -= fd_epsilon
            fp, fm = float(fn(xp.reshape(x.shape))), float(fn(xm.reshape(x.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite function value at element {_index(i, x.shape)}")
            grad[i] = (fp - fm) / (2.0 * fd_epsilon)
        return grad.reshape(x.shape)

    grads = None
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        m = idx.size
        stack = np.repeat(flat[None], 2 * m, axis=0)
        stack[np.arange(m), idx] += fd_epsilon
        stack[m + np.arange(m), idx] -= fd_epsilon
        vals = np.asarray(fn(stack.reshape(2 * m, *x.shape)), dtype=np.float64)
        vals = vals.reshape(2 * m, -1)
        bad = ~np.isfinite(vals).all(axis=1)
        if bad.any():
            i = idx[np.flatnonzero(bad)[0] % m]
            raise FloatingPointError(
                f"non-finite function value at element {_index(i, x.shape)}")
        if grads is None:
            grads = np.empty((vals.shape[1], n))
        grads[:, idx] = ((vals[:m] - vals[m:]) / (2.0 * fd_epsilon)).T
    out = grads.reshape(-1, *x.shape)
    return out[0] if out.shape[0] == 1 else out


def _check_image(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ShapeError(f"expected a single (1, 3, H, W) image, got {x.shape}")
    return x


def _phy_from_t(t_hat: np.ndarray, t_ref: np.ndarray) -> np.ndarray:
    d = t_hat.astype(np.float64) - t_ref.astype(np.float64)
    d = d.reshape(d.shape[0], -1)
    return np.sqrt((d * d).sum(axis=1)) / d.shape[1]


def loss_phy(x, model, t_ref) -> float:
    """||t_ref - t_hat(x)||_2 divided by the pixel count."""
    x = _check_image(np.asarray(x, dtype=model.dtype))
    t_ref = np.asarray(t_ref)
    t_hat = model.estimate(x).transmission
    if t_hat.shape != t_ref.shape:
        raise ShapeError(f"extent mismatch: t_hat {t_hat.shape} vs t_ref {t_ref.shape}")
    return float(_phy_from_t(t_hat, t_ref)[0])


def loss_feat(x, model, j_ref) -> float:
    """Mean squared difference between the dehazed `x` and the reference output."""
    x = _check_image(np.asarray(x, dtype=model.dtype))
    j_ref = np.asarray(j_ref)
    j, _ = model.dehaze(x, use_cache=False)
    if j.shape != j_ref.shape:
        raise ShapeError(f"extent mismatch: {j.shape} vs {j_ref.shape}")
    d = j.astype(np.float64) - j_ref.astype(np.float64)
    return float(np.mean(d * d))


def joint_losses(model, t_ref, j_ref) -> Callable:
    """Batched evaluator: (B, 1, 3, H, W) stack -> (B, 2) of [L_phy, L_feat].

    One stateless forward pass serves both losses.
    """
    def fn(stack):
        b = stack.shape[0]
        x = stack.reshape(b, *stack.shape[2:]).astype(model.dtype, copy=False)
        trace: dict = {}
        j, atm = model.dehaze(x, use_cache=False, trace=trace)
        phy = _phy_from_t(trace["transmission"], np.broadcast_to(t_ref, trace["transmission"].shape))
        d = (j.astype(np.float64) - j_ref.astype(np.float64)).reshape(b, -1)
        return np.stack([phy, (d * d).mean(axis=1)], axis=1)
    return fn


def paam(model, image, cfg: PathConfig = PathConfig(),
         gradient_provider: Callable | None = None, baseline=None) -> AttributionMap:
    """Midpoint-rule path integral of lam * grad(L_phy) * grad(L_feat).

    `gradient_provider(fn, x)`, if given, replaces finite differences; it
    receives the batched joint-loss function and the path point and must
    return a (2, *x.shape) array of gradients. `baseline` overrides the
    physically constructed start point.

    The model is evaluated in float64: float32 round-off divided by the
    difference step would swamp the gradients.
    """
    if model.dtype is not np.float64:
        model = model.astype(np.float64)
    image = _check_image(np.asarray(image, dtype=model.dtype))
    atm = model.estimate(image)
    t_ref = atm.transmission
    j_ref, _ = model.dehaze(image, use_cache=False)
    if baseline is None:
        base = make_baseline(image, atm, cfg, model.cfg.t_min)
    else:
        base = _check_image(np.asarray(baseline, dtype=model.dtype))
    fn = joint_losses(model, t_ref, j_ref)
    grad = gradient_provider or (lambda f, x: grad_fd(f, x, cfg.fd_epsilon, batched=True))

    acc = np.zeros(image.shape)
    for k in range(cfg.steps):
        alpha = (k + 0.5) / cfg.steps
        g_phy, g_feat = grad(fn, path_point(base, image, alpha))
        acc += g_phy * (cfg.lam * g_feat)
    m = (acc / cfg.steps).sum(axis=1, keepdims=True)
    meta = {
        "steps": cfg.steps, "lambda": cfg.lam, "t_mid": cfg.t_mid,
        "fd_epsilon": cfg.fd_epsilon, "raw_baseline": cfg.raw_baseline,
        "baseline_sha256": hashlib.sha256(np.ascontiguousarray(base).tobytes()).hexdigest(),
    }
    return AttributionMap(m, meta)
