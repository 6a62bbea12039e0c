"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records a vector-Jacobian product (VJP) closure.  Most VJPs are
written in terms of other ``Tensor`` ops, so the backward pass can itself be
recorded and differentiated again (``grad(..., create_graph=True)``).  Ops whose
VJP drops to raw numpy are first-order only; asking for a second derivative
through them raises :class:`UnsupportedOpError` instead of returning zeros.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_EPS = 1e-12

_state = threading.local()


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    """Incompatible operand shapes; the message names the offending node."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"shape mismatch at node '{op}': operand shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnsupportedOpError(AutodiffError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


# op kind -> whether its VJP is built from differentiable ops
OP_REGISTRY: dict[str, bool] = {}


def _register(name: str, second_order: bool = True) -> str:
    OP_REGISTRY[name] = second_order
    return name


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # ---- array-like surface -------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        leaves = [n for n in _topo_order(self) if n.op == "leaf" and n.requires_grad]
        grads = grad(self, leaves)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out.op = op
    return out


# ---- broadcasting helpers ---------------------------------------------

def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(op, shapes, "not broadcastable") from None


_OP_SUM_TO = _register("sum_to")
_OP_BROADCAST = _register("broadcast_to")


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Reduce ``x`` by summation to a shape it was broadcast from."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    src = x.shape
    return _node(data, (x,), lambda g: (broadcast_to(g, src),), _OP_SUM_TO)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(_OP_BROADCAST, [x.shape, shape]) from None
    src = x.shape
    return _node(data, (x,), lambda g: (sum_to(g, src),), _OP_BROADCAST)


# ---- arithmetic ---------------------------------------------------------

_OP_ADD = _register("add")
_OP_SUB = _register("sub")
_OP_MUL = _register("mul")
_OP_DIV = _register("div")
_OP_NEG = _register("neg")
_OP_POW = _register("pow")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(_OP_ADD, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), _OP_ADD)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(_OP_SUB, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), _OP_SUB)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(_OP_MUL, a.shape, b.shape)

    def vjp(g):
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp, _OP_MUL)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(_OP_DIV, a.shape, b.shape)

    def vjp(g):
        ga = g / b
        gb = sum_to(neg(ga * a / b), b.shape) if b.requires_grad else None
        return sum_to(ga, a.shape), gb

    return _node(a.data / b.data, (a, b), vjp, _OP_DIV)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),), _OP_NEG)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p == 2.0:
        return a * a
    return _node(a.data**p, (a,), lambda g: (g * (p * power(a, p - 1.0)),), _OP_POW)


def square(a) -> Tensor:
    a = as_tensor(a)
    return a * a


_OP_MATMUL = _register("matmul")


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(_OP_MATMUL, [a.shape, b.shape], "expected (n,k)@(k,m)")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, _OP_MATMUL)


_OP_AFFINE = _register("affine")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for 2-D ``x`` as one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(_OP_AFFINE, [x.shape, w.shape, b.shape], "expected (n,k)@(k,m)+(m,)")
    data = x.data @ w.data
    data += b.data

    def vjp(g):
        gx = matmul(g, transpose(w)) if x.requires_grad else None
        gw = matmul(transpose(x), g) if w.requires_grad else None
        gb = tsum(g, axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(data, (x, w, b), vjp, _OP_AFFINE)


# ---- shape ops ------------------------------------------------------------

_OP_RESHAPE = _register("reshape")
_OP_TRANSPOSE = _register("transpose")
_OP_GETITEM = _register("getitem")
_OP_SCATTER = _register("scatter")
_OP_CONCAT = _register("concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(_OP_RESHAPE, [src, tuple(shape)]) from None
    return _node(data, (a,), lambda g: (reshape(g, src),), _OP_RESHAPE)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), _OP_TRANSPOSE)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _node(a.data[idx], (a,), lambda g: (scatter(g, idx, src),), _OP_GETITEM)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def scatter(g, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``idx`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _is_basic_index(idx):
        out[idx] = g.data
    else:
        np.add.at(out, idx, g.data)
    return _node(out, (g,), lambda h: (getitem(h, idx),), _OP_SCATTER)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(_OP_CONCAT, [t.shape for t in ts], f"axis={axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), vjp, _OP_CONCAT)


# ---- reductions ---------------------------------------------------------

_OP_SUM = _register("sum")
_OP_CUMSUM = _register("cumsum", second_order=False)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, _OP_SUM)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g.data, axis), axis=axis), axis)
        return (Tensor(rev),)

    return _node(np.cumsum(a.data, axis=axis), (a,), vjp, _OP_CUMSUM)


# ---- elementwise ---------------------------------------------------------

_OP_EXP = _register("exp")
_OP_LOG = _register("log", second_order=False)
_OP_SQRT = _register("sqrt")
_OP_RELU = _register("relu")
_OP_LEAKY = _register("leaky_relu")
_OP_SIGMOID = _register("sigmoid")
_OP_TANH = _register("tanh")
_OP_SOFTPLUS = _register("softplus")
_OP_SIN = _register("sin", second_order=False)
_OP_COS = _register("cos", second_order=False)
_OP_ABS = _register("abs", second_order=False)


class _OutputRef:
    """Weak handle from a VJP closure to its own output node.

    A strong reference would form a cycle (node -> closure -> node) that keeps
    large activations alive until the cyclic collector runs.
    """

    __slots__ = ("_ref",)

    def bind(self, out: Tensor) -> Tensor:
        self._ref = weakref.ref(out)
        return out

    def __call__(self) -> Tensor:
        return self._ref()


def exp(a) -> Tensor:
    a = as_tensor(a)
    ref = _OutputRef()
    return ref.bind(_node(np.exp(a.data), (a,), lambda g: (g * ref(),), _OP_EXP))


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped to ``>= eps``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)
    live = (a.data >= eps).astype(np.float64)
    return _node(np.log(clamped), (a,), lambda g: (Tensor(g.data * live / clamped),), _OP_LOG)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    ref = _OutputRef()

    def vjp(g):
        y = ref()
        # subgradient 0 at the origin
        pos = Tensor((y.data > 0).astype(np.float64))
        return (g * pos * 0.5 / (y + (1.0 - pos)),)

    return ref.bind(_node(np.sqrt(a.data), (a,), vjp, _OP_SQRT))


_OP_MASK = _register("mask_mul")


def mask_mul(g, mask: np.ndarray) -> Tensor:
    """``g * mask`` for a constant (boolean or float) mask; linear in ``g``."""
    g = as_tensor(g)
    return _node(np.multiply(g.data, mask), (g,), lambda h: (mask_mul(h, mask),), _OP_MASK)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (mask_mul(g, mask),), _OP_RELU)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    m = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * m, (a,), lambda g: (mask_mul(g, m),), _OP_LEAKY)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ref = _OutputRef()

    def vjp(g):
        y = ref()
        return (g * y * (1.0 - y),)

    return ref.bind(_node(_sigmoid_np(a.data), (a,), vjp, _OP_SIGMOID))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    ref = _OutputRef()

    def vjp(g):
        y = ref()
        return (g * (1.0 - y * y),)

    return ref.bind(_node(np.tanh(a.data), (a,), vjp, _OP_TANH))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _node(data, (a,), lambda g: (g * sigmoid(a),), _OP_SOFTPLUS)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (Tensor(g.data * np.cos(a.data)),), _OP_SIN)


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (Tensor(-g.data * np.sin(a.data)),), _OP_COS)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (Tensor(g.data * sign),), _OP_ABS)


# ---- image ops -----------------------------------------------------------

_OP_IM2COL = _register("im2col")
_OP_COL2IM = _register("col2im")
_OP_UPSAMPLE = _register("upsample2")
_OP_POOL = _register("sumpool2")


def _conv_geometry(shape, k, stride, pad):
    b, h, w, c = shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(_OP_IM2COL, [shape], f"kernel {k} too large")
    return b, h, w, c, oh, ow


def im2col(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-last (B,H,W,C) -> (B*OH*OW, k*k*C) patch matrix, patch order (i, j, c)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(_OP_IM2COL, [x.shape], "expected (B,H,W,C)")
    b, h, w, c, oh, ow = _conv_geometry(x.shape, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    data = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, k * k * c)
    src = x.shape
    return _node(data, (x,), lambda g: (col2im(g, src, k, stride, pad),), _OP_IM2COL)


def col2im(cols, shape, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    cols = as_tensor(cols)
    b, h, w, c, oh, ow = _conv_geometry(shape, k, stride, pad)
    g = cols.data.reshape(b, oh, ow, k, k, c)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, :, i, j]
    data = xp[:, pad : pad + h, pad : pad + w]
    return _node(np.ascontiguousarray(data), (cols,), lambda h_: (im2col(h_, k, stride, pad),), _OP_COL2IM)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of channels-last (B,H,W,C)."""
    x = as_tensor(x)
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return _node(data, (x,), lambda g: (sumpool2(g),), _OP_UPSAMPLE)


def sumpool2(x) -> Tensor:
    """2x2 sum pooling of (B,H,W,C); the adjoint of :func:`upsample2`."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    data = x.data.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
    return _node(data, (x,), lambda g: (upsample2(g),), _OP_POOL)


# ---- backward ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` w.r.t. each of ``inputs``.

    Inputs unreachable from ``output`` get zero tensors.  With
    ``create_graph=True`` the returned gradients are themselves differentiable.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise AutodiffError(
                f"gradient requires a scalar root, got shape {output.shape}"
            )
        grad_output = Tensor(np.ones_like(output.data))
    else:
        grad_output = as_tensor(grad_output)

    adj: dict[int, Tensor] = {}
    if output.requires_grad:
        adj[id(output)] = grad_output
        order = _topo_order(output)
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                g = adj.get(id(node))
                if g is None or node._vjp is None:
                    continue
                if create_graph and not OP_REGISTRY.get(node.op, False):
                    raise UnsupportedOpError(
                        f"op '{node.op}' has no registered second derivative"
                    )
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = adj.get(id(p))
                    adj[id(p)] = pg if prev is None else prev + pg
    out = []
    for x in inputs:
        if x is output:
            out.append(grad_output)
        else:
            out.append(adj.get(id(x), Tensor(np.zeros(x.shape))))
    return out
