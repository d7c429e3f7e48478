"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients append a node to the active :class:`Tape`; ``backward`` replays the
tape in reverse order and accumulates gradients into the leaves.

Tensors keep the dtype of the array they wrap, so the same graph runs in
float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: tuple, output: "Tensor", backward_fn: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Optional[Tape] = None
        self.grad_enabled = True


_state = _State()


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager, a tape becomes the recording target for the
    current thread until the block exits::

        with Tape() as tape:
            loss = l1_loss(net(x), y)
            tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple, output: "Tensor", backward_fn: BackwardFn) -> None:
        output._tape = self
        output._index = len(self.nodes)
        self.nodes.append(Node(inputs, output, backward_fn))

    def clear(self) -> None:
        """Drop every recorded node. Leaf tensors and their ``grad`` survive."""
        for node in self.nodes:
            node.output._tape = None
            node.output._index = -1
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss._tape is None:
            if loss.requires_grad:
                loss._accumulate(seed)
            return
        if loss._tape is not self:
            raise ValueError("loss was recorded on a different tape")

        pending = {id(loss): seed}
        for node in reversed(self.nodes[: loss._index + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp._accumulate(gi)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi


def current_tape() -> Tape:
    if _state.stack:
        return _state.stack[-1]
    if _state.default is None:
        _state.default = Tape()
    return _state.default


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block (inference)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def backward(loss: "Tensor") -> None:
    """Backpropagate a scalar loss through the tape it was recorded on."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        return
    loss._tape.backward(loss)


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic is routed through the ops module so every path records.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self) -> "Tensor":
        from . import ops
        return ops.total(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)


def make_result(data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when any input needs gradients."""
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(inputs, out, backward_fn)
    return out
