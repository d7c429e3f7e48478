"""Frozen-weight super-resolution of whole 8-bit images."""
from __future__ import annotations

import logging
from typing import NamedTuple, Optional

import numpy as np

from .downsampler import Downsampler
from .imageio import to_uint8, to_unit
from .tensor import Tensor, no_grad
from .upsampler import Upsampler

log = logging.getLogger(__name__)


class SRResult(NamedTuple):
    sr: np.ndarray              # uint8 (sH, sW, 3)
    F_d: Optional[np.ndarray]   # (400, H, W) or None for the Baseline


def pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad a (C, H, W) array at the bottom/right up to a multiple of m."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return x, (ph, pw)


def super_resolve(lr: np.ndarray, up: Upsampler, down: Optional[Downsampler] = None) -> SRResult:
    """Run the networks on one uint8 (H, W, 3) image.

    Sizes that the U-Net cannot take are edge-padded and the outputs cropped
    back, so the result is always ``scale`` times the input size.
    """
    s = up.cfg.scale
    H, W = lr.shape[:2]
    x = to_unit(lr)
    m = down.cfg.size_multiple if down is not None else 1
    x, (ph, pw) = pad_to_multiple(x, m)
    if ph or pw:
        log.info("padded %dx%d input by (%d, %d) to a multiple of %d; output is cropped back",
                 H, W, ph, pw, m)
    with no_grad():
        X = Tensor(x[None])
        F_d = down(X) if down is not None else None
        if up.cfg.use_koala:
            if F_d is None:
                raise ValueError("KOALA upsampler needs the downsampling network")
            out = up(X, F_d)
        else:
            out = up(X)
    sr = to_uint8(out.sr.data[0, :, :s * H, :s * W])
    field = None if F_d is None else F_d.data[0, :, :H, :W]
    return SRResult(sr, field)
