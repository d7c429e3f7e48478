"""Central finite-difference checks for tape gradients (run in float64)."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-4,
                       coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``coords`` restricts the probe to flat indices; other entries are NaN.
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else coords
    out = np.full(flat.size, np.nan)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def analytic_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    mask = ~np.isnan(b)
    a, b = a[mask], b[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                    max_probes: Optional[int] = None, seed: int = 0) -> list[float]:
    """Relative error between tape and finite-difference gradient per tensor.

    With ``max_probes`` each tensor is probed on that many random entries
    instead of all of them.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
    rng = np.random.default_rng(seed)
    analytic = analytic_gradients(fn, tensors)
    errors = []
    for t, ga in zip(tensors, analytic):
        coords = None
        if max_probes is not None and t.data.size > max_probes:
            coords = rng.choice(t.data.size, size=max_probes, replace=False)
        gn = numerical_gradient(fn, t, eps=eps, coords=coords)
        errors.append(relative_error(ga, gn))
    return errors


def random_projection(shape: tuple, seed: int = 1234) -> np.ndarray:
    """Fixed random weights turning a tensor output into a smooth scalar."""
    return np.random.default_rng(seed).standard_normal(shape)
