"""Named tensor storage: JSON manifest plus a little-endian float32 blob.

Manifest layout::

    {"format": "dehazekit-weights", "version": 1, "blob": "<file>.bin",
     "blob_bytes": <int>,
     "tensors": [{"name": ..., "shape": [...], "dtype": "float32",
                  "byte_offset": <int>}, ...]}

Tensors are stored back to back in manifest order, C-order, no padding.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .fileio import atomic_write

FORMAT = "dehazekit-weights"
VERSION = 1


class WeightStoreError(ValueError):
    pass


class ManifestError(WeightStoreError):
    pass


class MissingTensorError(WeightStoreError, KeyError):
    pass


class ShapeMismatchError(WeightStoreError):
    pass


class TruncatedBlobError(WeightStoreError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "uniform" | "ones" | "zeros"
    fan_in: int = 1

    @property
    def bound(self) -> float:
        return 1.0 / math.sqrt(self.fan_in)


def model_layout(cfg: ModelConfig) -> list[ParamSpec]:
    """Every tensor the model reads, in storage order."""
    specs: list[ParamSpec] = []

    def uni(name, shape, fan_in):
        specs.append(ParamSpec(name, tuple(shape), "uniform", fan_in))

    def const(name, shape, value):
        specs.append(ParamSpec(name, tuple(shape), value))

    h, d, c = cfg.dark_hidden, cfg.feature_dim, cfg.channels
    e = "estimator"
    uni(f"{e}.dark.conv5.weight", (h, 3, 5, 5), 75)
    uni(f"{e}.dark.conv5.bias", (h,), 75)
    uni(f"{e}.dark.conv3.weight", (1, h, 3, 3), 9 * h)
    uni(f"{e}.dark.conv3.bias", (1,), 9 * h)
    uni(f"{e}.fuse.conv5.weight", (h, 4, 5, 5), 100)
    uni(f"{e}.fuse.conv5.bias", (h,), 100)
    uni(f"{e}.fuse.conv3.weight", (d, h, 3, 3), 9 * h)
    uni(f"{e}.fuse.conv3.bias", (d,), 9 * h)
    mlp_in, mlp_hidden = d + 3, 2 * (d + 3)
    uni(f"{e}.mlp.fc1.weight", (mlp_hidden, mlp_in), mlp_in)
    uni(f"{e}.mlp.fc1.bias", (mlp_hidden,), mlp_in)
    uni(f"{e}.mlp.fc2.weight", (mlp_hidden, mlp_hidden), mlp_hidden)
    uni(f"{e}.mlp.fc2.bias", (mlp_hidden,), mlp_hidden)
    uni(f"{e}.mlp.head.weight", (2 * c + 1, mlp_hidden), mlp_hidden)
    uni(f"{e}.mlp.head.bias", (2 * c + 1,), mlp_hidden)

    span = 2 * cfg.rel_pos_range - 1
    c_in = 3
    for i, (depth, cs) in enumerate(zip(cfg.depths, cfg.stage_channels)):
        s = f"backbone.stage{i}"
        uni(f"{s}.down.weight", (cs, c_in, 3, 3), 9 * c_in)
        uni(f"{s}.down.bias", (cs,), 9 * c_in)
        for j in range(depth):
            b = f"{s}.block{j}"
            const(f"{b}.ln1.gamma", (cs,), "ones")
            const(f"{b}.ln1.beta", (cs,), "zeros")
            uni(f"{b}.attn.qkv.weight", (3 * cs, cs), cs)
            uni(f"{b}.attn.qkv.bias", (3 * cs,), cs)
            uni(f"{b}.attn.proj.weight", (cs, cs), cs)
            uni(f"{b}.attn.proj.bias", (cs,), cs)
            uni(f"{b}.attn.rel_pos", (cfg.heads, span, span), span * span)
            const(f"{b}.gamma1", (cs,), "ones")
            const(f"{b}.beta1", (cs,), "zeros")
            const(f"{b}.ln2.gamma", (cs,), "ones")
            const(f"{b}.ln2.beta", (cs,), "zeros")
            uni(f"{b}.mlp.fc1.weight", (4 * cs, cs), cs)
            uni(f"{b}.mlp.fc1.bias", (4 * cs,), cs)
            uni(f"{b}.mlp.fc2.weight", (cs, 4 * cs), 4 * cs)
            uni(f"{b}.mlp.fc2.bias", (cs,), 4 * cs)
            const(f"{b}.gamma2", (cs,), "ones")
            const(f"{b}.beta2", (cs,), "zeros")
        c_in = cs

    r = "recon"
    uni(f"{r}.conv1x1.weight", (c, c_in, 1, 1), c_in)
    uni(f"{r}.conv1x1.bias", (c,), c_in)
    const(f"{r}.bn.gamma", (c,), "ones")
    const(f"{r}.bn.beta", (c,), "zeros")
    const(f"{r}.bn.running_mean", (c,), "zeros")
    const(f"{r}.bn.running_var", (c,), "ones")
    uni(f"{r}.dw.weight", (c, 1, 3, 3), 9)
    uni(f"{r}.dw.bias", (c,), 9)
    uni(f"{r}.out.weight", (3, c, 3, 3), 9 * c)
    uni(f"{r}.out.bias", (3,), 9 * c)
    return specs


class WeightStore:
    """Ordered mapping of tensor name to float32 array."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingTensorError(f"weight store has no tensor named {name!r}") from None

    def __setitem__(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.setflags(write=False)
        self._tensors[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def manifest(self, blob_name: str = "weights.bin") -> dict:
        entries, offset = [], 0
        for name, arr in self._tensors.items():
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "byte_offset": offset})
            offset += arr.size * 4
        return {"format": FORMAT, "version": VERSION, "blob": blob_name,
                "blob_bytes": offset, "tensors": entries}

    def blob(self) -> bytes:
        return b"".join(arr.astype("<f4").tobytes() for arr in self._tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest(), sort_keys=True).encode())
        h.update(self.blob())
        return h.hexdigest()

    def map(self, fn) -> "WeightStore":
        """New store with `fn` applied to every tensor (name, array) -> array."""
        return WeightStore({name: fn(name, arr) for name, arr in self._tensors.items()})

    def validate_against(self, cfg: ModelConfig) -> "WeightStore":
        for spec in model_layout(cfg):
            arr = self[spec.name]
            if arr.shape != spec.shape:
                raise ShapeMismatchError(
                    f"tensor {spec.name!r} has shape {arr.shape}, model expects {spec.shape}"
                )
        return self


def init_weights(cfg: ModelConfig, seed: int | None = None) -> WeightStore:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; norm affines at identity."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = WeightStore()
    for spec in model_layout(cfg):
        if spec.init == "ones":
            store[spec.name] = np.ones(spec.shape)
        elif spec.init == "zeros":
            store[spec.name] = np.zeros(spec.shape)
        else:
            b = spec.bound
            store[spec.name] = rng.uniform(-b, b, size=spec.shape)
    return store


def zero_weights(cfg: ModelConfig) -> WeightStore:
    return WeightStore({s.name: np.zeros(s.shape) for s in model_layout(cfg)})


def save_weights(store: WeightStore, path: str | Path) -> None:
    """Write the manifest to `path` and the blob next to it (suffix ``.bin``)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    atomic_write(blob_path, store.blob())
    atomic_write(path, json.dumps(store.manifest(blob_path.name), indent=1) + "\n")


def _validate_manifest(man) -> list[dict]:
    if not isinstance(man, dict) or man.get("format") != FORMAT:
        raise ManifestError(f"not a {FORMAT} manifest")
    if man.get("version") != VERSION:
        raise ManifestError(f"unsupported manifest version {man.get('version')!r}")
    entries = man.get("tensors")
    if not isinstance(entries, list):
        raise ManifestError("manifest 'tensors' must be a list")
    seen, expected = set(), 0
    for i, ent in enumerate(entries):
        try:
            name, shape, off = ent["name"], ent["shape"], ent["byte_offset"]
        except (KeyError, TypeError):
            raise ManifestError(f"manifest entry {i} lacks name/shape/byte_offset") from None
        if ent.get("dtype", "float32") != "float32":
            raise ManifestError(f"tensor {name!r}: unsupported dtype {ent.get('dtype')!r}")
        if name in seen:
            raise ManifestError(f"tensor {name!r} listed more than once")
        seen.add(name)
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise ManifestError(f"tensor {name!r}: bad shape {shape!r}")
        if not isinstance(off, int) or off != expected:
            kind = "overlaps its predecessor" if isinstance(off, int) and off < expected else \
                "leaves a gap"
            raise ManifestError(
                f"tensor {name!r}: byte_offset {off!r} {kind} (expected {expected})"
            )
        expected += math.prod(shape) * 4
    if man.get("blob_bytes", expected) != expected:
        raise ManifestError(
            f"blob_bytes {man.get('blob_bytes')} disagrees with tensor sizes ({expected})"
        )
    return entries


def load_weights(path: str | Path, cfg: ModelConfig | None = None) -> WeightStore:
    path = Path(path)
    try:
        man = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    entries = _validate_manifest(man)
    blob_path = path.parent / man.get("blob", path.with_suffix(".bin").name)
    blob = blob_path.read_bytes()
    need = sum(math.prod(e["shape"]) for e in entries) * 4
    if len(blob) < need:
        raise TruncatedBlobError(f"{blob_path}: {len(blob)} bytes, manifest needs {need}")
    if len(blob) > need:
        raise ManifestError(f"{blob_path}: {len(blob) - need} trailing bytes beyond manifest")
    store = WeightStore()
    for ent in entries:
        count = math.prod(ent["shape"])
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=ent["byte_offset"])
        store[ent["name"]] = arr.reshape(ent["shape"])
    if cfg is not None:
        store.validate_against(cfg)
    return store
