"""Parameter containers and the conv building blocks shared by both networks."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

from . import ops
from .tensor import Tensor


class ModelWeights(OrderedDict):
    """Named parameters (``str -> Tensor``) in creation order."""

    def add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 gain: float = 1.0, dtype=np.float32) -> None:
        fan_in = cin * k * k
        std = gain * np.sqrt(2.0 / fan_in)
        w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def add_zero_conv(self, name: str, cin: int, cout: int, k: int, dtype=np.float32) -> None:
        self[f"{name}.weight"] = Tensor(np.zeros((cout, cin, k, k), dtype=dtype), requires_grad=True)
        self[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return ops.conv2d(x, self[f"{name}.weight"], self[f"{name}.bias"], stride, "zero")

    def conv_names(self) -> list[str]:
        return [n[: -len(".weight")] for n, t in self.items() if n.endswith(".weight") and t.ndim == 4]

    def astype(self, dtype) -> "ModelWeights":
        out = ModelWeights()
        for n, t in self.items():
            out[n] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        return out

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def arrays(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((prefix + n, t.data) for n, t in self.items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "",
                    strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns the names that were missing."""
        missing = []
        for n, t in self.items():
            key = prefix + n
            if key not in arrays:
                missing.append(n)
                continue
            a = np.asarray(arrays[key])
            if a.shape != t.shape:
                raise ValueError(f"{key}: shape {a.shape} != {t.shape}")
            t.data = a.astype(t.dtype, copy=True)
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        return missing

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.values())


def resblock(w: ModelWeights, name: str, x: Tensor, pre_activation: bool = False) -> Tensor:
    """Residual block; ``conv-relu-conv + x`` or ``(relu-conv-relu-conv)(x) + x``."""
    h = ops.relu(x) if pre_activation else x
    h = w.conv(f"{name}.conv2", ops.relu(w.conv(f"{name}.conv1", h)))
    return x + h


def add_resblock(w: ModelWeights, name: str, ch: int, rng: np.random.Generator,
                 dtype=np.float32) -> None:
    w.add_conv(f"{name}.conv1", ch, ch, 3, rng, dtype=dtype)
    # small last layer keeps deep unnormalised residual stacks stable at init
    w.add_conv(f"{name}.conv2", ch, ch, 3, rng, gain=0.1, dtype=dtype)


def parameters(*weights: Iterable[ModelWeights]) -> list[Tensor]:
    return [t for w in weights for t in w.values()]
