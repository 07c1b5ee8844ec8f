"""Binary PGM (P5) and PPM (P6) codecs for 8-bit frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pnm(path, image: np.ndarray) -> None:
    """Write [H, W] uint8 as P5 or [H, W, 3] uint8 as P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 is supported")
    w, h = int(w), int(h)
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset) if len(buf) - offset >= n else None
    if data is None:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape((h, w) if channels == 1 else (h, w, 3)).copy()
