"""Binary PPM (P6) and PGM (P5) readers/writers, 8-bit only.

Color images travel as float arrays in [0, 1] of shape (H, W, 3); masks as
uint8 arrays of shape (H, W). Rendered values are clamped to [0, 1] and
rounded half-to-even before quantization.
"""

from __future__ import annotations

import numpy as np


class PnmError(Exception):
    pass


def _read_tokens(blob: bytes, count: int, start: int):
    """Read `count` whitespace-separated header tokens, honoring '#' comments."""
    tokens = []
    i = start
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not blob[j:j + 1].isspace():
            j += 1
        if j == i:
            raise PnmError("truncated header")
        tokens.append(blob[i:j])
        i = j
    return tokens, i + 1  # skip single whitespace after maxval


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != magic:
        raise PnmError(f"expected {magic.decode()} file")
    tokens, off = _read_tokens(blob, 3, 2)
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise PnmError("only 8-bit (maxval 255) images are supported")
    need = width * height * channels
    if len(blob) - off < need:
        raise PnmError("truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=off)
    if channels == 1:
        return data.reshape(height, width).copy()
    return data.reshape(height, width, channels).copy()


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as float in [0, 1], shape (H, W, 3)."""
    raw = _read_pnm(path, b"P6", 3)
    return raw.astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 mask as uint8, shape (H, W)."""
    return _read_pnm(path, b"P5", 1)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale to 255 and round half-to-even."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a float (H, W, 3) image in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PnmError("expected (H, W, 3) image")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantize(img).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a uint8 (H, W) mask as binary P5."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise PnmError("expected (H, W) mask")
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > 255:
            raise PnmError("mask values outside uint8 range")
        mask = mask.astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(mask.tobytes())
