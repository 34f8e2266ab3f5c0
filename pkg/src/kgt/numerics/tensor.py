"""Dense tensor value type with a tape-free reverse-mode graph.

Every tensor produced by an operator remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``backward`` walks
the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from kgt.errors import NonFiniteError

_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _dtype


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision (used for gradient checking)."""
    global _dtype
    prev = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def neg_sentinel(dtype=None):
    """Most negative finite value; stands in for -inf in additive masks."""
    return np.finfo(dtype or _dtype).min


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; the real definitions live in ops
    def __add__(self, other):
        from kgt.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from kgt.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from kgt.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from kgt.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from kgt.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from kgt.numerics import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from kgt.numerics import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from kgt.numerics import ops
        return ops.permute(self, axes)

    def sum(self):
        from kgt.numerics import ops
        return ops.sum(self)

    def mean(self):
        from kgt.numerics import ops
        return ops.mean(self)


class Parameter(Tensor):
    """A named trainable tensor whose gradient accumulates across backward calls."""

    def __init__(self, value, name: str = "", dtype=None):
        super().__init__(value, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an operator output, checking finiteness and wiring the graph."""
    # a reduction is NaN/inf whenever any element is; only an overflowing
    # sum of finite values needs the elementwise re-check
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order
