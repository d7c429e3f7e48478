"""Shared fixtures data: a small natural-image pool cut from scikit-image's samples."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import skimage.data as skd


def _rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3]).astype(np.uint8)


# (source, top, left); training crops and validation crops never overlap
TRAIN_CROPS = [
    ("astronaut", 0, 0), ("astronaut", 300, 300), ("coffee", 0, 0), ("coffee", 200, 380),
    ("rocket", 0, 0), ("rocket", 220, 420), ("chelsea", 60, 120), ("immunohistochemistry", 0, 0),
    ("immunohistochemistry", 300, 300), ("hubble_deep_field", 0, 0), ("hubble_deep_field", 500, 600),
    ("retina", 600, 600), ("camera", 0, 0), ("camera", 300, 300), ("brick", 0, 0), ("gravel", 0, 0),
]
VAL_CROPS = [
    ("astronaut", 0, 320), ("coffee", 250, 0), ("rocket", 260, 0), ("camera", 320, 0),
    ("coins", 100, 100), ("grass", 200, 200), ("chelsea", 150, 320),
    ("immunohistochemistry", 0, 320),
]


@lru_cache(maxsize=None)
def _source(name: str) -> np.ndarray:
    return _rgb(getattr(skd, name)())


def crops(spec, size: int) -> list[np.ndarray]:
    out = []
    for name, top, left in spec:
        src = _source(name)
        if top + size > src.shape[0] or left + size > src.shape[1]:
            raise ValueError(f"crop {name}@{top},{left} of {size} leaves {src.shape}")
        out.append(src[top:top + size, left:left + size].copy())
    return out


def train_images(size: int = 192) -> list[np.ndarray]:
    return crops(TRAIN_CROPS, size)


def val_images(size: int = 128) -> list[np.ndarray]:
    return crops(VAL_CROPS, size)
