"""Slow, loop-based reference implementations.

These exist only to cross-check the vectorised kernels. They share no code
with the modules they check and compute in Python floats (64-bit).
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, kernel, bias=None, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                yi = i * stride + di - padding
                                xj = j * stride + dj - padding
                                if 0 <= yi < h and 0 <= xj < w:
                                    acc += x[b, c, yi, xj] * k[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def depthwise_loop(x, kernel, padding=0):
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    out = []
    for ch in range(c):
        out.append(conv2d_loop(x[:, ch:ch + 1], kernel[ch:ch + 1], padding=padding))
    return np.concatenate(out, axis=1)


def bilinear_sample(img2d, y, x):
    """Evaluate the bilinear interpolant of a 2-D grid at continuous (y, x)."""
    h, w = img2d.shape
    y0 = min(int(math.floor(y)), h - 1)
    x0 = min(int(math.floor(x)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img2d[y0, x0] + (1 - fy) * fx * img2d[y0, x1]
            + fy * (1 - fx) * img2d[y1, x0] + fy * fx * img2d[y1, x1])


def min_pool_loop(img2d, window):
    h, w = img2d.shape
    before = (window - 1) // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            best = math.inf
            for di in range(window):
                for dj in range(window):
                    yi = min(max(i + di - before, 0), h - 1)
                    xj = min(max(j + dj - before, 0), w - 1)
                    best = min(best, img2d[yi, xj])
            out[i, j] = best
    return out


def dense_loop(vec, weight, bias):
    out = []
    for o in range(len(weight)):
        acc = float(bias[o])
        for i, v in enumerate(vec):
            acc += float(weight[o][i]) * float(v)
        out.append(acc)
    return out


def naive_window_attention(q, k, v, k_cache=None, v_cache=None, bias=None):
    """Softmax(Q [Kc; K]^T / sqrt(d) + [0 | B]) [Vc; V] one query at a time.

    q, k, v: (num_windows, T, d); caches: (L, d) or None; bias: (T, T) or None.
    """
    q = np.asarray(q, dtype=np.float64)
    nw, t, d = q.shape
    lc = 0 if k_cache is None else len(k_cache)
    out = np.zeros((nw, t, d))
    for wi in range(nw):
        keys = [np.asarray(k_cache[j], dtype=np.float64) for j in range(lc)] + list(k[wi])
        vals = [np.asarray(v_cache[j], dtype=np.float64) for j in range(lc)] + list(v[wi])
        for i in range(t):
            logits = []
            for j, kv in enumerate(keys):
                s = sum(float(q[wi, i, m]) * float(kv[m]) for m in range(d)) / math.sqrt(d)
                if bias is not None and j >= lc:
                    s += float(bias[i, j - lc])
                logits.append(s)
            mx = max(logits)
            ex = [math.exp(s - mx) for s in logits]
            z = sum(ex)
            for m in range(d):
                out[wi, i, m] = sum(e * float(vals[j][m]) for j, e in enumerate(ex)) / z
    return out


def alg1_reference(cache_ids, new_ids, c_a_mean, eta, max_len=None):
    """Kept-index bookkeeping of the atmospheric-guided cache update."""
    gamma = 1.0 - c_a_mean * eta
    n_keep = math.floor(gamma * len(cache_ids))
    merged = list(cache_ids[:n_keep]) + list(new_ids)
    if max_len is not None and len(merged) > max_len:
        merged = merged[len(merged) - max_len:]
    return merged


def cache_length_recurrence(steps, new_len, gamma, max_len=None):
    lengths, n = [], 0
    for _ in range(steps):
        n = math.floor(gamma * n) + new_len
        if max_len is not None:
            n = min(n, max_len)
        lengths.append(n)
    return lengths


def gaussian_window(size=11, sigma=1.5):
    g = [math.exp(-((i - size // 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return [[a * b for b in g] for a in g]


def ssim_loop(x2d, y2d, peak=1.0, size=11, sigma=1.5):
    """Mean SSIM over all fully-contained windows, computed window by window."""
    x2d = np.asarray(x2d, dtype=np.float64)
    y2d = np.asarray(y2d, dtype=np.float64)
    g = gaussian_window(size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w = x2d.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for a in range(size):
                for b in range(size):
                    wt = g[a][b]
                    xv, yv = x2d[i + a, j + b], y2d[i + a, j + b]
                    mx += wt * xv
                    my += wt * yv
                    sxx += wt * xv * xv
                    syy += wt * yv * yv
                    sxy += wt * xv * yv
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)
