"""Atomic file writes and the PPM/PGM image formats."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported Netpbm file."""


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P6 (RGB) or P5 (gray) into a float32 (1, C, H, W) tensor in [0, 1]."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P6 or P5")
    vals = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        try:
            vals.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"bad {what} field {tok!r}") from None
    width, height, maxval = vals
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise ImageFormatError(f"bad header values {width}x{height} maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dt.itemsize
    if len(buf) - pos < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes, have {len(buf) - pos}")
    px = np.frombuffer(buf, dtype=dt, count=count, offset=pos).astype(np.float64)
    img = px.reshape(height, width, channels).transpose(2, 0, 1)[None] / maxval
    return img.astype(np.float32)


def encode_netpbm(x, maxval: int = 255) -> bytes:
    """Encode a (1, C, H, W) / (C, H, W) / (H, W) tensor with C in {1, 3}."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"can only encode one image at a time, got batch {x.shape[0]}")
        x = x[0]
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    if c not in (1, 3):
        raise ValueError(f"images must have 1 or 3 channels, got {c}")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    q = np.clip(np.rint(np.nan_to_num(x) * maxval), 0, maxval).astype(dt)
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def read_image(path: str | Path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def write_image(path: str | Path, x, maxval: int = 255) -> None:
    atomic_write(path, encode_netpbm(x, maxval))
