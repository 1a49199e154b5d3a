"""Named parameter tensors with Adam state.

A ParamStore is an ordered name -> Tensor map plus per-name first/second
moment buffers and a shared step counter. Sub-networks claim dotted
namespaces (encoder.drug.*, diffusion.target.*, regressor.var.*, ...),
which is also how stage isolation is audited.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def reset_adam(self) -> None:
        """Drop optimizer state; each training stage starts a fresh Adam."""
        self.adam_m.clear()
        self.adam_v.clear()
        self.step = 0

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Copy of current values, optionally restricted to a namespace."""
        return {
            name: t.data.copy()
            for name, t in self._params.items()
            if name.startswith(prefix)
        }

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r} in loaded values")
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(
                    f"parameter {name!r}: loaded shape {arr.shape} != expected {t.shape}")
            t.data[...] = arr.astype(self.dtype, copy=False)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam over every parameter; zeroes grads afterwards.

    Parameters that never received a gradient keep zero moments, so their
    values are bit-identical after any number of steps.
    """
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, p in store.items():
        if p.grad is None:
            if name not in store.adam_m:
                continue  # never trained: zero moments, zero update
            grad = np.zeros_like(p.data)
        else:
            grad = p.grad
        if name not in store.adam_m:
            store.adam_m[name] = np.zeros_like(p.data)
            store.adam_v[name] = np.zeros_like(p.data)
        kernels.adam_update(
            p.data.reshape(-1), grad.reshape(-1),
            store.adam_m[name].reshape(-1), store.adam_v[name].reshape(-1),
            lr, beta1, beta2, eps, bc1, bc2)
        if p.grad is not None:
            p.grad[...] = 0
