"""Kernel-predicting downsampling network (a residual U-Net).

The net maps an LR image X to a field of per-pixel 20x20 degradation
kernels F_d (B, 400, H, W), each normalised to unit sum. With F_d the LR
image can be re-synthesised from the HR image by stride-s local filtering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .degrade import KERNEL_SIZE
from .layers import ModelWeights, add_resblock, resblock
from .tensor import Tensor

KERNEL_TAPS = KERNEL_SIZE * KERNEL_SIZE


@dataclass(frozen=True)
class DownsamplerConfig:
    base_channels: int = 64
    unet_levels: int = 3
    resblocks_per_level: int = 2

    @property
    def total_conv_count(self) -> int:
        L, R = self.unet_levels, self.resblocks_per_level
        # input conv, 2R per stage (L encoder + L-1 decoder), L-1 strided
        # downs, L-1 up-convs, two head convs
        return 1 + 2 * R * (2 * L - 1) + 2 * (L - 1) + 2

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.unet_levels - 1)

    def validate(self) -> None:
        if self.base_channels < 1 or self.unet_levels < 1 or self.resblocks_per_level < 0:
            raise ValueError(f"invalid downsampler config {self}")


class Downsampler:
    def __init__(self, cfg: DownsamplerConfig, weights: ModelWeights):
        self.cfg = cfg
        self.weights = weights

    def channels(self, level: int) -> int:
        return self.cfg.base_channels * 2 ** level

    def predict_kernels(self, X: Tensor) -> Tensor:
        """F_d for an LR batch; spatial dims must divide by 2**(levels-1)."""
        cfg, w = self.cfg, self.weights
        H, W = X.shape[2:]
        m = cfg.size_multiple
        if H % m or W % m:
            raise ValueError(f"input size {(H, W)} not divisible by {m}")
        R = cfg.resblocks_per_level

        h = w.conv("conv_in", X)
        for r in range(R):
            h = resblock(w, f"enc0.res{r}", h)
        skips = [h]
        for lvl in range(1, cfg.unet_levels):
            h = w.conv(f"down{lvl}", h, stride=2)
            for r in range(R):
                h = resblock(w, f"enc{lvl}.res{r}", h)
            skips.append(h)
        for lvl in range(cfg.unet_levels - 2, -1, -1):
            h = ops.concat([ops.upsample_nearest(h, 2), skips[lvl]], axis=1)
            h = w.conv(f"up{lvl}", h)
            for r in range(R):
                h = resblock(w, f"dec{lvl}.res{r}", h)
        h = ops.relu(w.conv("head1", h))
        return ops.normalize_kernels(w.conv("head2", h), KERNEL_TAPS)

    __call__ = predict_kernels

    def count_convs(self) -> int:
        return len(self.weights.conv_names())


def build_downsampler(cfg: DownsamplerConfig = DownsamplerConfig(), seed: int = 0,
                      dtype=np.float32) -> Downsampler:
    cfg.validate()
    rng = np.random.default_rng(seed)
    w = ModelWeights()
    R = cfg.resblocks_per_level
    ch = [cfg.base_channels * 2 ** lvl for lvl in range(cfg.unet_levels)]
    w.add_conv("conv_in", 3, ch[0], 3, rng, dtype=dtype)
    for r in range(R):
        add_resblock(w, f"enc0.res{r}", ch[0], rng, dtype)
    for lvl in range(1, cfg.unet_levels):
        w.add_conv(f"down{lvl}", ch[lvl - 1], ch[lvl], 3, rng, dtype=dtype)
        for r in range(R):
            add_resblock(w, f"enc{lvl}.res{r}", ch[lvl], rng, dtype)
    for lvl in range(cfg.unet_levels - 2, -1, -1):
        w.add_conv(f"up{lvl}", ch[lvl + 1] + ch[lvl], ch[lvl], 3, rng, dtype=dtype)
        for r in range(R):
            add_resblock(w, f"dec{lvl}.res{r}", ch[lvl], rng, dtype)
    w.add_conv("head1", ch[0], ch[0], 3, rng, dtype=dtype)
    # zero head: the untrained net predicts the uniform 1/400 kernel
    w.add_zero_conv("head2", ch[0], KERNEL_TAPS, 3, dtype=dtype)
    return Downsampler(cfg, w)


def reconstruct_lr(Y: Tensor, F_d: Tensor, s: int, padding: str = "replicate") -> Tensor:
    """X_hat: stride-s local filtering of Y by the per-pixel 20x20 kernels."""
    if Y.shape[2] != s * F_d.shape[2] or Y.shape[3] != s * F_d.shape[3]:
        raise ValueError(f"HR size {Y.shape[2:]} is not {s} x kernel field {F_d.shape[2:]}")
    return ops.local_filter(Y, F_d, KERNEL_SIZE, s, padding)


def downsampler_loss(X_hat: Tensor, X, F_d: Tensor, k_d) -> tuple[Tensor, Tensor, Tensor]:
    """(total, reconstruction term, kernel-mean term).

    ``k_d`` is (B, 20, 20) or (B, 400); it is compared with the spatial mean
    of F_d as a (B, 400, 1, 1) tensor.
    """
    k = np.asarray(k_d.data if isinstance(k_d, Tensor) else k_d)
    B = F_d.shape[0]
    k = k.reshape(B, KERNEL_TAPS, 1, 1).astype(F_d.dtype)
    recon = ops.l1_loss(X_hat, X)
    kern = ops.l1_loss(ops.spatial_mean(F_d), k)
    return recon + kern, recon, kern
