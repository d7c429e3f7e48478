"""8-bit RGB PNG I/O and the [0, 255] <-> [-1, 1] mapping."""
from __future__ import annotations

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    """Read an image as (H, W, 3) uint8."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError("write_png expects uint8; use to_uint8 first")
    Image.fromarray(img).save(path, format="PNG")


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    return (img.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3); out-of-range values clamp."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)
