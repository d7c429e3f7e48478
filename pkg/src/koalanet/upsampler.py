"""Upsampling network with kernel-oriented adaptive local adjustment.

Trunk: ``conv -> 5 adjustment blocks -> 7 residual blocks -> relu`` gives
f_u. A residual branch produces the detail image r; a filter branch produces
s*s per-pixel 5x5 upsampling filters F_u which are applied to X and
pixel-shuffled into Y_tilde. The output is ``Y_tilde + r``.

Each adjustment block computes::

    y = local_filter(T(x) * m, k, 7) + x,   T = conv . relu . conv . relu
    m = 1 + (conv . relu . conv)(f_d)
    k = normalize(delta + (conv1x1 . relu . conv1x1)(f_d), 49)

with the last conv of the m and k heads zero-initialised, so a fresh block
is exactly the residual block ``T(x) + x`` the Baseline uses in its place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import ops
from .downsampler import KERNEL_TAPS
from .layers import ModelWeights, add_resblock, resblock
from .tensor import Tensor

KOALA_K = 7
UP_K = 5
SUPPORTED_SCALES = (2, 4)


@dataclass(frozen=True)
class UpsamplerConfig:
    scale: int = 4
    channels: int = 64
    n_koala: int = 5
    n_res: int = 7
    use_koala: bool = True

    def validate(self) -> None:
        if self.scale not in SUPPORTED_SCALES:
            raise ValueError(f"unsupported scale {self.scale}")
        if self.channels < 4 or self.channels % 4:
            raise ValueError("channels must be a positive multiple of 4")


class UpsamplerOutput(NamedTuple):
    sr: Tensor
    F_u: Tensor
    r: Tensor
    y_tilde: Tensor


def _delta(k: int, dtype) -> np.ndarray:
    d = np.zeros((1, k * k, 1, 1), dtype=dtype)
    d[0, (k * k) // 2] = 1
    return d


def extract_kernel_features(w: ModelWeights, F_d: Tensor) -> Tensor:
    h = F_d
    for i in (1, 2, 3):
        h = ops.relu(w.conv(f"fd.conv{i}", h))
    return h


def koala_params(w: ModelWeights, name: str, f_d: Tensor) -> tuple[Tensor, Tensor]:
    """(m, k) for one block: per-channel per-pixel scales and 7x7 unit-sum filters."""
    m = w.conv(f"{name}.m2", ops.relu(w.conv(f"{name}.m1", f_d))) + 1.0
    k_raw = w.conv(f"{name}.k2", ops.relu(w.conv(f"{name}.k1", f_d)))
    k = ops.normalize_kernels(k_raw + _delta(KOALA_K, k_raw.dtype), KOALA_K * KOALA_K)
    return m, k


def koala_module(w: ModelWeights, block: str, head: str, x: Tensor, f_d: Tensor) -> Tensor:
    if x.shape[2:] != f_d.shape[2:]:
        raise ValueError(f"feature {x.shape} and kernel feature {f_d.shape} sizes differ")
    t = w.conv(f"{block}.conv2", ops.relu(w.conv(f"{block}.conv1", ops.relu(x))))
    m, k = koala_params(w, head, f_d)
    return ops.local_filter(t * m, k, KOALA_K, 1, "zero") + x


def apply_upsampling_filters(X: Tensor, F_u: Tensor, s: int, padding: str = "replicate") -> Tensor:
    """Filter X with each 25-channel chunk of F_u and pixel-shuffle the results.

    Chunk ``j`` fills sub-pixel position ``divmod(j, s)`` of every s x s cell.
    """
    B, C, H, W = X.shape
    taps = UP_K * UP_K
    if F_u.shape[1] != taps * s * s:
        raise ValueError(f"F_u has {F_u.shape[1]} channels, expected {taps * s * s}")
    outs = [ops.local_filter(X, F_u[:, j * taps:(j + 1) * taps], UP_K, 1, padding)
            for j in range(s * s)]
    stacked = ops.concat(outs, axis=1)  # channel j*C + c
    n = s * s
    perm = np.array([j * C + c for c in range(C) for j in range(n)])
    return ops.pixel_shuffle(stacked[:, perm], s)


def assemble_sr(y_tilde: Tensor, r: Tensor) -> Tensor:
    if y_tilde.shape != r.shape:
        raise ValueError(f"shape mismatch {y_tilde.shape} vs {r.shape}")
    return y_tilde + r


class Upsampler:
    def __init__(self, cfg: UpsamplerConfig, weights: ModelWeights):
        self.cfg = cfg
        self.weights = weights

    def forward(self, X: Tensor, F_d: Optional[Tensor] = None) -> UpsamplerOutput:
        cfg, w = self.cfg, self.weights
        s = cfg.scale
        h = w.conv("conv_in", X)
        f_d = None
        if cfg.use_koala:
            if F_d is None:
                raise ValueError("KOALA upsampler needs a kernel field")
            f_d = extract_kernel_features(w, F_d)
        for i in range(cfg.n_koala):
            if cfg.use_koala:
                h = koala_module(w, f"block{i}", f"koala{i}", h, f_d)
            else:
                h = resblock(w, f"block{i}", h, pre_activation=True)
        for j in range(cfg.n_res):
            h = resblock(w, f"res{j}", h, pre_activation=True)
        f_u = ops.relu(h)

        r = ops.pixel_shuffle(ops.relu(w.conv("res_branch.conv1", f_u)), 2)
        if s == 4:
            r = ops.pixel_shuffle(ops.relu(w.conv("res_branch.conv2", r)), 2)
        r = w.conv("res_branch.out", r)

        F_u = ops.normalize_kernels(
            w.conv("filter_branch.conv2", ops.relu(w.conv("filter_branch.conv1", f_u))), UP_K * UP_K)
        y_tilde = apply_upsampling_filters(X, F_u, s)
        return UpsamplerOutput(assemble_sr(y_tilde, r), F_u, r, y_tilde)

    __call__ = forward


def _add_koala_heads(w: ModelWeights, cfg: UpsamplerConfig, rng, dtype) -> None:
    c = cfg.channels
    w.add_conv("fd.conv1", KERNEL_TAPS, c, 3, rng, dtype=dtype)
    w.add_conv("fd.conv2", c, c, 3, rng, dtype=dtype)
    w.add_conv("fd.conv3", c, c, 3, rng, dtype=dtype)
    for i in range(cfg.n_koala):
        w.add_conv(f"koala{i}.m1", c, c, 3, rng, dtype=dtype)
        w.add_zero_conv(f"koala{i}.m2", c, c, 3, dtype=dtype)
        w.add_conv(f"koala{i}.k1", c, c, 1, rng, dtype=dtype)
        w.add_zero_conv(f"koala{i}.k2", c, KOALA_K * KOALA_K, 1, dtype=dtype)


def build_upsampler(cfg: UpsamplerConfig = UpsamplerConfig(), seed: int = 0,
                    dtype=np.float32) -> Upsampler:
    """Trunk and branches are drawn first, so a KOALA build and a Baseline
    build with the same seed share identical trunk weights."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    c, s = cfg.channels, cfg.scale
    w = ModelWeights()
    w.add_conv("conv_in", 3, c, 3, rng, dtype=dtype)
    for i in range(cfg.n_koala):
        add_resblock(w, f"block{i}", c, rng, dtype)
    for j in range(cfg.n_res):
        add_resblock(w, f"res{j}", c, rng, dtype)
    w.add_conv("res_branch.conv1", c, 2 * c, 3, rng, dtype=dtype)
    if s == 4:
        w.add_conv("res_branch.conv2", c // 2, c, 3, rng, dtype=dtype)
        w.add_conv("res_branch.out", c // 4, 3, 3, rng, gain=0.1, dtype=dtype)
    else:
        w.add_conv("res_branch.out", c // 2, 3, 3, rng, gain=0.1, dtype=dtype)
    w.add_conv("filter_branch.conv1", c, c, 3, rng, dtype=dtype)
    w.add_zero_conv("filter_branch.conv2", c, UP_K * UP_K * s * s, 3, dtype=dtype)
    if cfg.use_koala:
        _add_koala_heads(w, cfg, np.random.default_rng([seed, 1]), dtype)
    return Upsampler(cfg, w)


def upgrade_to_koala(baseline: Upsampler, seed: int = 0) -> Upsampler:
    """Insert freshly initialised KOALA heads into a trained Baseline."""
    cfg = UpsamplerConfig(baseline.cfg.scale, baseline.cfg.channels, baseline.cfg.n_koala,
                          baseline.cfg.n_res, use_koala=True)
    dtype = next(iter(baseline.weights.values())).dtype
    w = ModelWeights((n, t) for n, t in baseline.weights.items())
    _add_koala_heads(w, cfg, np.random.default_rng([seed, 1]), dtype)
    return Upsampler(cfg, w)


def upsampler_forward(up: Upsampler, X: Tensor, F_d: Optional[Tensor], s: int) -> UpsamplerOutput:
    if s != up.cfg.scale:
        raise ValueError(f"network built for x{up.cfg.scale}, asked for x{s}")
    return up.forward(X, F_d)
