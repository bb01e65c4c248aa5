"""Cache memory benchmark: eviction on vs. eviction off over a schedule of calls."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import KVCache, cached_window_attention, compute_window_size, window_geometry
from .config import ModelConfig

COLUMNS = ("step", "H", "W", "c_a_mean", "gamma", "cache_len_on", "cache_len_off",
           "bytes_on", "bytes_off", "ms")


@dataclass(frozen=True)
class BenchRow:
    step: int
    H: int
    W: int
    c_a_mean: float
    gamma: float
    cache_len_on: int
    cache_len_off: int
    bytes_on: int
    bytes_off: int
    ms: float


def default_schedule(steps: int = 20, size: int = 64, c_a: float = 1.0):
    return [(size, size)] * steps, [c_a] * steps


def load_schedule(path: str | Path):
    """JSON: {"resolutions": [[H, W], ...], "c_a": [float, ...]} of equal length."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    res = [tuple(int(v) for v in hw) for hw in data["resolutions"]]
    c_a = [float(v) for v in data["c_a"]]
    if len(res) != len(c_a):
        raise ValueError("schedule needs as many c_a values as resolutions")
    return res, c_a


def bench_cache(cfg: ModelConfig, resolutions, c_a_schedule, dim: int | None = None,
                seed: int = 0) -> list[BenchRow]:
    """Drive two caches through the same attention calls.

    The "on" cache uses the configured eta and length cap; the "off" cache
    never evicts and has no cap. Each call pools its window keys/values into
    one w*w segment, as a transformer block does.
    """
    dim = dim or cfg.channels
    rng = np.random.default_rng(seed)
    first_h, first_w = resolutions[0]
    wb = compute_window_size(first_h, first_w, cfg.alpha, cfg.beta, cfg.tau)
    cap = cfg.max_cache_len if cfg.max_cache_len is not None else 4 * wb * wb
    on = KVCache(dim, cap, cfg.eta)
    off = KVCache(dim, None, 0.0)
    rows = []
    for step, ((h, w), c_a) in enumerate(zip(resolutions, c_a_schedule), start=1):
        geo = window_geometry(h, w, compute_window_size(h, w, cfg.alpha, cfg.beta, cfg.tau))
        t = geo.w_adapt * geo.w_adapt
        q, k, v = (rng.standard_normal((geo.num_windows, t, dim)).astype(np.float32)
                   for _ in range(3))
        start = time.perf_counter()
        cached_window_attention(q, k, v, on)
        for cache in (on, off):
            if cache.segment_len is None:
                cache.segment_len = t
        rec = on.update(k.mean(axis=0), v.mean(axis=0), c_a)
        ms = (time.perf_counter() - start) * 1e3
        off.update(k.mean(axis=0), v.mean(axis=0), c_a)
        rows.append(BenchRow(step, h, w, c_a, rec.gamma, len(on), len(off),
                             on.nbytes, off.nbytes, round(ms, 3)))
    return rows


def to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(COLUMNS)
    for r in rows:
        wr.writerow([getattr(r, c) for c in COLUMNS])
    return buf.getvalue()
