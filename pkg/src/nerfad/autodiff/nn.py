"""Parameter containers and the layers used by every network in the build."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameter tensors and child modules, in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            if k not in state:
                continue
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = np.sqrt(2.0)):
        super().__init__()
        bound = gain * np.sqrt(3.0 / n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = _param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise T.ShapeError("linear", [x.shape, self.weight.shape], f"expected last dim {self.n_in}")
        return T.affine(x, self.weight, self.bias)


class Conv2d(Module):
    """Cross-correlation over channels-last (B,H,W,C) built from im2col + matmul."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, gain: float = np.sqrt(2.0)):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = (k - 1) // 2 if pad is None else pad
        fan_in = c_in * k * k
        bound = gain * np.sqrt(3.0 / fan_in)
        # rows ordered (ki, kj, c_in) to match im2col
        self.weight = _param(rng.uniform(-bound, bound, size=(fan_in, c_out)))
        self.bias = _param(np.zeros(c_out))

    def out_size(self, h: int) -> int:
        return (h + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise T.ShapeError("conv2d", [x.shape], f"expected (B,H,W,{self.c_in})")
        b, h, w, _ = x.shape
        oh, ow = self.out_size(h), self.out_size(w)
        cols = T.im2col(x, self.k, self.stride, self.pad)
        y = T.affine(cols, self.weight, self.bias)
        return T.reshape(y, (b, oh, ow, self.c_out))
