"""Dense float tensors with reverse-mode automatic differentiation.

Image-like values use (N, C, H, W) layout with contiguous row-major float32
storage. Gradients are accumulated by walking the operation graph backward
from a scalar loss. float64 is accepted as well so verification oracles can
run the exact same graphs in 64-bit.
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True

# When set (tests / debug runs), every op output is checked for NaN/inf.
check_finite = False


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array plus an optional gradient buffer.

    Tensors produced by operations keep references to their parents and a
    backward closure; ``backward()`` on a scalar runs the whole graph in
    reverse topological order, accumulating into ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        if check_finite and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values produced by op {op!r}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _item_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar w.r.t. every graph input."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        # Iterative post-order over parents that participate in grad flow.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, 0))
            else:
                topo.append(node)

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is None or node.grad is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named learnable weight.

    ``trainable`` gates both gradient flow and optimizer updates. ``stat``
    marks persistent model state (normalization running statistics) that is
    saved, loaded and counted with the model but never optimized.
    """

    __slots__ = ("name", "stat", "_trainable")

    def __init__(self, data, name="", trainable=True, stat=False):
        trainable = bool(trainable) and not stat
        super().__init__(data, requires_grad=trainable, op="param")
        self.name = name
        self.stat = bool(stat)
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        if self.stat:
            flag = False
        self._trainable = bool(flag)
        self.requires_grad = self._trainable

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "stat" if self.stat else ("trainable" if self._trainable else "frozen")
        return f"Parameter({self.name!r}, shape={self.data.shape}, {kind})"


def _item_err(t: Tensor):
    raise ValueError(f"item() on non-scalar tensor of shape {t.data.shape}")
