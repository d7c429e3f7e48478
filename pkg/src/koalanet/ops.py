"""Differentiable operators over :class:`~koalanet.tensor.Tensor`.

Spatial geometry shared by ``conv2d`` and ``local_filter``: with kernel size
``k`` and stride ``s``, the ``"zero"`` and ``"replicate"`` modes pad
``(k - s) // 2`` pixels before and ``k - s - (k - s) // 2`` after, so an
``H``-pixel input yields ``H / s`` outputs and output pixel ``i`` reads input
rows ``s*i - (k - s)//2 ... s*i - (k - s)//2 + k - 1``. ``"valid"`` pads
nothing.
"""
from __future__ import annotations

from typing import Literal, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, make_result

PaddingMode = Literal["zero", "replicate", "valid"]
_PADDINGS = ("zero", "replicate", "valid")

ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# padding helpers (numpy level)


def _same_pads(k: int, s: int) -> tuple[int, int]:
    if k < s:
        raise ValueError(f"kernel size {k} smaller than stride {s}")
    before = (k - s) // 2
    return before, k - s - before


def _pads_for(k: int, s: int, padding: str) -> tuple[int, int]:
    if padding not in _PADDINGS:
        raise ValueError(f"unknown padding mode {padding!r}")
    if padding == "valid":
        return 0, 0
    return _same_pads(k, s)


def _pad(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int], mode: str) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    width = ((0, 0), (0, 0), ph, pw)
    if mode == "replicate":
        return np.pad(x, width, mode="edge")
    return np.pad(x, width)


def _unpad(g: np.ndarray, ph: tuple[int, int], pw: tuple[int, int], mode: str) -> np.ndarray:
    H = g.shape[2] - ph[0] - ph[1]
    W = g.shape[3] - pw[0] - pw[1]
    if mode != "replicate":
        return g[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W]
    # edge padding copied border pixels outward; fold their gradient back
    gh = g[:, :, ph[0]:ph[0] + H, :].copy()
    if ph[0]:
        gh[:, :, 0, :] += g[:, :, :ph[0], :].sum(axis=2)
    if ph[1]:
        gh[:, :, -1, :] += g[:, :, ph[0] + H:, :].sum(axis=2)
    out = gh[:, :, :, pw[0]:pw[0] + W].copy()
    if pw[0]:
        out[:, :, :, 0] += gh[:, :, :, :pw[0]].sum(axis=3)
    if pw[1]:
        out[:, :, :, -1] += gh[:, :, :, pw[0] + W:].sum(axis=3)
    return out


def _out_size(n: int, k: int, s: int, pads: tuple[int, int]) -> int:
    size = (n + pads[0] + pads[1] - k) // s + 1
    if size <= 0:
        raise ValueError(f"zero-size output: input {n}, kernel {k}, stride {s}")
    return size


def _check4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (B, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: PaddingMode = "zero") -> Tensor:
    """Cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw)."""
    _check4(x, "input")
    _check4(weight, "weight")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"input has {C} channels, weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"bias shape {bias.shape} != ({O},)")
    ph = _pads_for(kh, stride, padding)
    pw = _pads_for(kw, stride, padding)
    Ho = _out_size(H, kh, stride, ph)
    Wo = _out_size(W, kw, stride, pw)
    if stride == 1 and padding != "replicate" and kh * kw > 1 and O <= 2 * C:
        return _conv2d_shifted(x, weight, bias, ph, pw, Ho, Wo)
    K = C * kh * kw
    w2 = weight.data.reshape(O, K)

    if kh == 1 and kw == 1 and stride == 1:
        cols = x.data.reshape(B, C, H * W)
    else:
        xp = _pad(x.data, ph, pw, padding)
        cols6 = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                                       j:j + stride * (Wo - 1) + 1:stride]
        cols = cols6.reshape(B, K, Ho * Wo)

    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, Ho, Wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(B, C, kh, kw, Ho, Wo)
                gxp = np.zeros((B, C, H + ph[0] + ph[1], W + pw[0] + pw[1]), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride] += gcols[:, :, i, j]
                gx = _unpad(gxp, ph, pw, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, inputs, backward)


def _conv2d_shifted(x: Tensor, weight: Tensor, bias: Optional[Tensor], ph, pw,
                    Ho: int, Wo: int) -> Tensor:
    """Stride-1 conv as one GEMM over the padded input followed by shifted adds.

    Avoids building the (C*kh*kw)-row column matrix, which dominates the
    cost when C is large relative to O.
    """
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Hp, Wp = H + ph[0] + ph[1], W + pw[0] + pw[1]
    xf = np.ascontiguousarray(_pad(x.data, ph, pw, "zero").transpose(1, 0, 2, 3)).reshape(C, -1)
    wa = weight.data.transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
    Z = (wa @ xf).reshape(kh, kw, O, B, Hp, Wp)
    out = np.empty((O, B, Ho, Wo), dtype=Z.dtype)
    if bias is not None:
        out[:] = bias.data[:, None, None, None]
    else:
        out[:] = 0
    for i in range(kh):
        for j in range(kw):
            out += Z[i, j, :, :, i:i + Ho, j:j + Wo]
    del Z
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        gw = gb = gx = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if weight.requires_grad or x.requires_grad:
            gZ = np.zeros((kh, kw, O, B, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gZ[i, j, :, :, i:i + Ho, j:j + Wo] = gt
            gZf = gZ.reshape(kh * kw * O, -1)
            if weight.requires_grad:
                gw = (gZf @ xf.T).reshape(kh, kw, O, C).transpose(2, 3, 0, 1)
            if x.requires_grad:
                gxp = (wa.T @ gZf).reshape(C, B, Hp, Wp)
                gx = gxp[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W].transpose(1, 0, 2, 3)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(np.ascontiguousarray(out.transpose(1, 0, 2, 3)), inputs, backward)


def local_filter(x: Tensor, filters: Tensor, k: int, stride: int = 1,
                 padding: PaddingMode = "zero") -> Tensor:
    """Per-pixel filtering: every output pixel has its own k*k kernel.

    ``filters`` is (B, k*k, Ho, Wo) with tap ``dy*k + dx`` in the channel
    axis; the same kernel is applied to every channel of ``x``.
    """
    _check4(x, "input")
    _check4(filters, "filters")
    B, C, H, W = x.shape
    if filters.shape[0] != B:
        raise ValueError("batch size of filters and input differ")
    if filters.shape[1] != k * k:
        raise ValueError(f"filters have {filters.shape[1]} taps, expected {k * k}")
    ph = _pads_for(k, stride, padding)
    Ho = _out_size(H, k, stride, ph)
    Wo = _out_size(W, k, stride, ph)
    if filters.shape[2:] != (Ho, Wo):
        raise ValueError(f"filter field {filters.shape[2:]} inconsistent with output {(Ho, Wo)}")

    xp = _pad(x.data, ph, ph, padding)
    f = filters.data
    span_h = stride * (Ho - 1) + 1
    span_w = stride * (Wo - 1) + 1
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.dtype, f.dtype))
    tmp = np.empty_like(out)
    for t in range(k * k):
        dy, dx = divmod(t, k)
        np.multiply(xp[:, :, dy:dy + span_h:stride, dx:dx + span_w:stride], f[:, t:t + 1], out=tmp)
        out += tmp

    def backward(g):
        gx = gf = None
        if filters.requires_grad:
            gf = np.empty_like(f)
            for t in range(k * k):
                dy, dx = divmod(t, k)
                sl = xp[:, :, dy:dy + span_h:stride, dx:dx + span_w:stride]
                gf[:, t] = np.einsum("bchw,bchw->bhw", g, sl)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t in range(k * k):
                dy, dx = divmod(t, k)
                gxp[:, :, dy:dy + span_h:stride, dx:dx + span_w:stride] += g * f[:, t:t + 1]
            gx = _unpad(gxp, ph, ph, padding)
        return gx, gf

    return make_result(out, (x, filters), backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum (unlike where) lets NaN through so divergence stays visible
    return make_result(np.maximum(x.data, x.dtype.type(0)), (x,),
                       lambda g: (g * mask,))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _binary_shape(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _binary_shape(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _binary_shape(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


# ---------------------------------------------------------------------------
# reductions and losses


def total(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over H and W: (B, C, H, W) -> (B, C, 1, 1)."""
    _check4(x, "input")
    hw = x.shape[2] * x.shape[3]
    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / hw, x.shape).astype(x.dtype),))


def l1_loss(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Mean absolute difference."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# kernel normalisation


def normalize_kernels(x: Tensor, n: int) -> Tensor:
    """Shift each group of ``n`` channels so it sums to 1.

    ``out = x - mean_n(x) + 1/n`` per pixel. The channel count must be a
    multiple of ``n``; consecutive groups are normalised independently.
    """
    _check4(x, "input")
    B, C, H, W = x.shape
    if n <= 0 or C % n:
        raise ValueError(f"channel count {C} is not a multiple of kernel length {n}")
    xr = x.data.reshape(B, C // n, n, H, W).astype(np.float64)
    exact = xr - xr.mean(axis=2, keepdims=True) + 1.0 / n
    out = exact.astype(x.dtype)
    if out.dtype != np.float64:
        # rounding each tap to low precision drifts the sum by up to n ulps;
        # fold the residual into the smallest-magnitude tap, where it rounds exactly
        resid = 1.0 - out.sum(axis=2, dtype=np.float64, keepdims=True)
        idx = np.abs(out).argmin(axis=2)[:, :, None]
        tap = np.take_along_axis(out, idx, axis=2).astype(np.float64)
        np.put_along_axis(out, idx, (tap + resid).astype(out.dtype), axis=2)
    out = out.reshape(x.shape)

    def backward(g):
        gr = g.reshape(B, C // n, n, H, W)
        return ((gr - gr.mean(axis=2, keepdims=True)).reshape(x.shape),)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# layout


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, r*H, r*W); channel c*r*r + dy*r + dx -> (dy, dx)."""
    _check4(x, "input")
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ValueError(f"{Cr} channels not divisible by r^2 = {r * r}")
    C = Cr // (r * r)
    out = x.data.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)
    return make_result(out, (x,), lambda g: (_unshuffle(g, r),))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, C, Hr, Wr = a.shape
    if Hr % r or Wr % r:
        raise ValueError(f"spatial size {(Hr, Wr)} not divisible by {r}")
    H, W = Hr // r, Wr // r
    return a.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    _check4(x, "input")
    out = _unshuffle(x.data, r)
    B, C, Hr, Wr = x.shape

    def backward(g):
        return (g.reshape(B, C, r, r, Hr // r, Wr // r).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return make_result(out, (x,), backward)


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    _check4(x, "input")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, r, axis=2), r, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(B, C, H, r, W, r).sum(axis=(3, 5)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(out, tensors, backward)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        if _is_basic(index):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result(out, (x,), backward)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)
