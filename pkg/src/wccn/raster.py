"""Binary PPM (P6) and PGM (P5) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"PPM needs uint8 HxWx3 pixels, got {arr.dtype} {arr.shape}")
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"PGM needs uint8 HxW pixels, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _read_header(buf: bytes, path) -> tuple[str, int, int, int, int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated raster header")
        fields.append(buf[start:pos])
    magic = fields[0].decode("ascii", "replace")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed raster header") from None
    return magic, w, h, maxval, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    return _read(path, "P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read(path, "P5", 1)


def _read(path, magic_expected: str, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, w, h, maxval, off = _read_header(buf, path)
    if magic != magic_expected or maxval != 255:
        raise ValueError(f"{path}: expected {magic_expected} with maxval 255, got {magic} {maxval}")
    n = w * h * channels
    if len(buf) - off != n:
        raise ValueError(f"{path}: expected {n} pixel bytes, found {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def to_bytes_minmax(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max scale to 0..255; returns the bytes and the (min, max) used."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = (values - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(values)
    return np.rint(scaled).astype(np.uint8), lo, hi


def draw_box(pixels: np.ndarray, box, color: tuple[int, int, int]) -> None:
    """Draw a 1px outline of a half-open box in place."""
    h, w = pixels.shape[:2]
    x0, y0 = max(0, box.x0), max(0, box.y0)
    x1, y1 = min(w, box.x1) - 1, min(h, box.y1) - 1
    if x1 < x0 or y1 < y0:
        return
    pixels[y0, x0:x1 + 1] = color
    pixels[y1, x0:x1 + 1] = color
    pixels[y0:y1 + 1, x0] = color
    pixels[y0:y1 + 1, x1] = color
