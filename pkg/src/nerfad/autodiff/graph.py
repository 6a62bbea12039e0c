"""Named-leaf computation graphs on top of the tensor tape."""

from __future__ import annotations

import inspect
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import AutodiffError, Tensor, grad, sqrt, tsum


class UnboundLeafError(AutodiffError, KeyError):
    pass


class ComputeGraph:
    """A differentiable function of named leaves.

    ``fn`` receives one keyword argument per leaf (as :class:`Tensor`) and
    returns the root tensor.  ``parameters`` are leaves bound by default;
    explicit bindings override them.
    """

    def __init__(self, fn: Callable[..., Tensor], parameters: Mapping[str, np.ndarray] | None = None):
        self.fn = fn
        self.parameters = {k: np.asarray(v, dtype=np.float64) for k, v in (parameters or {}).items()}
        self.leaf_names = [
            name
            for name, p in inspect.signature(fn).parameters.items()
            if p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY) and p.default is p.empty
        ]
        self._cache: dict[str, Tensor] | None = None
        self.output: Tensor | None = None

    def _leaves(self, bindings: Mapping, track: Iterable[str] = ()) -> dict[str, Tensor]:
        merged = {**self.parameters, **dict(bindings)}
        missing = [n for n in self.leaf_names if n not in merged]
        if missing:
            raise UnboundLeafError(f"unbound leaf: {', '.join(missing)}")
        track = set(track)
        leaves = {}
        for name in self.leaf_names:
            value = merged[name]
            data = value.data if isinstance(value, Tensor) else value
            leaves[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=name in track, name=name)
        return leaves

    def forward(self, bindings: Mapping, track: Iterable[str] = ()) -> Tensor:
        leaves = self._leaves(bindings, track)
        out = self.fn(**leaves)
        if not isinstance(out, Tensor):
            out = Tensor(out)
        self._cache = leaves
        self.output = out
        return out


def evaluate(graph: ComputeGraph, bindings: Mapping) -> np.ndarray:
    """Run the graph forward and return the root value."""
    return graph.forward(bindings).data.copy()


def gradient(graph: ComputeGraph, bindings: Mapping, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    """d(root)/d(leaf) for each leaf named in ``wrt``; root must be scalar."""
    wrt = list(wrt)
    unknown = [w for w in wrt if w not in graph.leaf_names]
    if unknown:
        raise UnboundLeafError(f"not a leaf of this graph: {', '.join(unknown)}")
    out = graph.forward(bindings, track=wrt)
    if out.size != 1:
        raise AutodiffError(f"gradient requires a scalar root, got shape {out.shape}")
    leaves = graph._cache
    grads = grad(out, [leaves[w] for w in wrt])
    return {w: g.data.copy() for w, g in zip(wrt, grads)}


def input_gradient_norm(critic: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """Per-sample ``||d critic / d x||_2`` as a differentiable tensor.

    ``x`` has a leading batch axis; the critic's outputs are summed before
    differentiation, which is exact because samples do not interact.  The
    returned norms keep the graph, so penalties built on them can be
    differentiated w.r.t. the critic's parameters.
    """
    if not x.requires_grad:
        x = Tensor(x.data, requires_grad=True)
    score = critic(x)
    total = tsum(score)
    (gx,) = grad(total, [x], create_graph=True)
    axes = tuple(range(1, gx.ndim))
    if not axes:
        return sqrt(gx * gx)
    return sqrt(tsum(gx * gx, axis=axes))


def gradient_penalty(critic: Callable[[Tensor], Tensor], x: Tensor, lam: float) -> Tensor:
    """``lam * mean((||grad critic(x)|| - 1)^2)`` over the batch."""
    norms = input_gradient_norm(critic, x)
    return ((norms - 1.0) ** 2).mean() * float(lam)


def grad_check(
    fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  ``coords``
    restricts the check to a subset of flat indices.
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(grad_fn(point.copy()), dtype=np.float64).reshape(-1)
    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(point.copy()))
        flat[i] = orig - h
        fm = float(fn(point.copy()))
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def graph_grad_check(graph: ComputeGraph, bindings: Mapping, leaf: str, h: float = 1e-5, coords=None) -> float:
    """:func:`grad_check` of a scalar graph with respect to one leaf."""
    base = dict(bindings)

    def f(v):
        return float(evaluate(graph, {**base, leaf: v}).reshape(-1)[0])

    def g(v):
        return gradient(graph, {**base, leaf: v}, [leaf])[leaf]

    merged = {**graph.parameters, **base}
    point = merged[leaf].data if isinstance(merged[leaf], Tensor) else merged[leaf]
    return grad_check(f, g, np.asarray(point, dtype=np.float64), h, coords)
