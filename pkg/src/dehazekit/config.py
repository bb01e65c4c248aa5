from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fileio import atomic_write


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of range."""


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 0.8
    w_mse: float = 0.1
    w_ssim: float = 0.1

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"loss_weights.{f.name} must be a nonnegative number, got {v!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the dehazing model and its analysis tools."""

    channels: int = 32
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: int = 1
    # estimator widths
    dark_hidden: int = 8
    feature_dim: int = 16
    # dynamic window
    alpha: int = 8
    beta: int = 4
    tau: int = 1024
    rel_pos_range: int = 8
    # KV cache
    eta: float = 0.5
    max_cache_len: int | None = None
    # physics
    q_a: float = 0.999
    t_min: float = 0.1
    # attribution
    lam: float = 1.0
    t_mid: float = 0.7
    fd_epsilon: float = 1e-3
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        if isinstance(self.loss_weights, dict):
            try:
                lw = LossWeights(**self.loss_weights)
            except TypeError as exc:
                raise ConfigError(f"loss_weights: {exc}") from None
            object.__setattr__(self, "loss_weights", lw)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.channels * 2 ** i for i in range(len(self.depths)))

    def validate(self) -> "ModelConfig":
        def positive_int(name):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

        def in_range(name, lo, hi, lo_open=False, hi_open=False):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be a number, got {v!r}")
            if (v < lo or v > hi) or (lo_open and v == lo) or (hi_open and v == hi):
                lb, rb = "(" if lo_open else "[", ")" if hi_open else "]"
                raise ConfigError(f"{name} must lie in {lb}{lo}, {hi}{rb}, got {v!r}")

        for name in ("channels", "heads", "dark_hidden", "feature_dim", "alpha", "tau",
                     "rel_pos_range"):
            positive_int(name)
        if not isinstance(self.beta, int) or isinstance(self.beta, bool) or self.beta < 0:
            raise ConfigError(f"beta must be a nonnegative integer, got {self.beta!r}")
        if len(self.depths) != 4 or any(
            not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in self.depths
        ):
            raise ConfigError(f"depths must be four nonnegative integers, got {self.depths!r}")
        if self.channels % self.heads:
            raise ConfigError(f"heads must divide channels ({self.channels}), got {self.heads}")
        if self.max_cache_len is not None:
            positive_int("max_cache_len")
        in_range("eta", 0.0, 1.0)
        in_range("q_a", 0.0, 1.0)
        in_range("t_min", 0.0, 1.0, lo_open=True, hi_open=True)
        in_range("t_mid", 0.0, 1.0, lo_open=True, hi_open=True)
        in_range("lam", 0.0, float("inf"))
        in_range("fd_epsilon", 1e-5, 1e-2)
        in_range("ln_eps", 0.0, 1.0, lo_open=True)
        in_range("bn_eps", 0.0, 1.0, lo_open=True)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if not isinstance(self.loss_weights, LossWeights):
            raise ConfigError("loss_weights must be an object with w_l1, w_mse, w_ssim")
        self.loss_weights.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        atomic_write(path, json.dumps(self.to_dict(), indent=2) + "\n")
