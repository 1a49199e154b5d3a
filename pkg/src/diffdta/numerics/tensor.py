"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps a contiguous ndarray (float32 by default, float64 for
verification runs) plus an optional gradient buffer. Ops record a closure
that routes the output gradient back to the inputs; ``backward`` runs the
closures in reverse topological order from a scalar loss. Recording is
suppressed inside ``no_grad()`` blocks, which is how frozen sub-networks
are kept out of the graph entirely.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; outputs created inside are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast up from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    # -- arithmetic (broadcasting elementwise) -----------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out = make_op(self.data + other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g, other.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = make_op(-self.data, (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = make_op(self.data * other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g * self.data, other.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        out = make_op(self.data.reshape(shape), (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(g.reshape(src_shape))
        return out

    def __getitem__(self, index):
        # slice/ellipsis indexing only: positions never repeat, so the
        # backward scatter is a plain in-place add
        out = make_op(self.data[index], (self,))
        if out._parents:
            def bwd(g):
                full = np.zeros_like(self.data)
                full[index] += g
                self.accumulate_grad(full)
            out._backward = bwd
        return out

    # -- nonlinearity / reductions -------------------------------------------
    def relu(self):
        mask = self.data > 0
        out = make_op(np.where(mask, self.data, 0), (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(g * mask)
        return out

    def sigmoid(self):
        # exp overflow on the negative tail yields inf and a correct 0.0
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-self.data))
        out = make_op(s, (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(g * s * (1.0 - s))
        return out

    def exp(self):
        e = np.exp(self.data)
        out = make_op(e, (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(g * e)
        return out

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient is passed through inside [lo, hi] only."""
        inside = (self.data >= lo) & (self.data <= hi)
        out = make_op(np.clip(self.data, lo, hi), (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(g * inside)
        return out

    def sum(self):
        out = make_op(np.asarray(self.data.sum()), (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(
                np.broadcast_to(g, self.shape).astype(self.data.dtype, copy=False))
        return out

    def mean(self):
        n = self.data.size
        out = make_op(np.asarray(self.data.mean()), (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(
                np.broadcast_to(g / n, self.shape).astype(self.data.dtype, copy=False))
        return out

    def matmul(self, other):
        """self @ other for self of rank 2 or 3 and a rank-2 weight."""
        other = as_tensor(other)
        if other.ndim != 2 or self.ndim not in (2, 3):
            raise ValueError(
                f"matmul: unsupported shapes {self.shape} @ {other.shape}")
        if self.shape[-1] != other.shape[0]:
            raise ValueError(
                f"matmul: inner dimensions disagree for {self.shape} @ {other.shape}")
        out = make_op(self.data @ other.data, (self, other))
        if out._parents:
            def bwd(g):
                if self.requires_grad:
                    self.accumulate_grad(g @ other.data.T)
                if other.requires_grad:
                    if self.ndim == 2:
                        other.accumulate_grad(self.data.T @ g)
                    else:
                        other.accumulate_grad(
                            np.tensordot(self.data, g, axes=([0, 1], [0, 1])))
            out._backward = bwd
        return out

    __matmul__ = matmul


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: tuple) -> Tensor:
    """Create an op output, recording parents only while grads are enabled."""
    out = Tensor(data)
    if _GRAD_ENABLED:
        tracked = tuple(p for p in parents if p.requires_grad or p._parents)
        if tracked:
            out._parents = parents
            out.requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every contributing tensor, starting at a scalar."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss._parents:
        raise RuntimeError("backward: no recorded forward computation for this tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._parents:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # free the graph so tensors do not pin intermediate buffers
    for node in topo:
        node._parents = ()
        node._backward = None
