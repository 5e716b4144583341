"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Only what the BN-MLP, the TTA losses and the attack objectives need:
row-wise broadcasting, per-channel batch reductions (mean, variance,
median), a handful of pointwise maps and row gather/concat.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "sum",
    "mean",
    "var",
    "median",
    "softmax",
    "take_rows",
    "slice_rows",
    "concat_rows",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: tuple):
        self.primitive = primitive
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shown}")


class Tensor:
    """A value in the differentiation graph.

    ``data`` is never mutated after construction. ``_rule`` maps the adjoint
    of this node to a tuple of parent adjoints (one per parent).
    """

    __slots__ = ("data", "requires_grad", "_parents", "_rule", "op")
    # make ndarray <op> Tensor dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _rule=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._rule = _rule
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _rule=rule if needs else None, op=op)


# -- broadcasting -----------------------------------------------------------

def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    # row-wise: (N, C) against (1, C) or (C,)
    if a.ndim == 2 and (sb == (1, sa[1]) or sb == (sa[1],)):
        return
    if b.ndim == 2 and (sa == (1, sb[1]) or sa == (sb[1],)):
        return
    raise ShapeError(name, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.sum(axis=0)
    return g.sum(axis=0, keepdims=True)


# -- binary pointwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), rule, "div")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), rule, "matmul")


# -- unary pointwise --------------------------------------------------------

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes where the input is inside the closed interval."""
    x = _as_tensor(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    mask = (x.data >= lo_) & (x.data <= hi_)
    return _node(np.clip(x.data, lo_, hi_), (x,), lambda g: (g * mask,), "clamp")


# -- reductions -------------------------------------------------------------

def _reduce_shape(name: str, x: Tensor, axis) -> None:
    if axis is not None and (x.data.ndim == 0 or axis >= x.data.ndim):
        raise ShapeError(name, x.shape)


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    _reduce_shape("sum", x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), rule, "sum")


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _reduce_shape("mean", x, axis)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean", x.shape)
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(out, (x,), rule, "mean")


def var(x, axis: int = 0, keepdims: bool = True) -> Tensor:
    """Biased (1/N) variance along ``axis``."""
    x = _as_tensor(x)
    _reduce_shape("var", x, axis)
    n = x.shape[axis]
    if n == 0:
        raise ShapeError("var", x.shape)
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    out = (centered ** 2).mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (2.0 / n) * centered,)

    return _node(out, (x,), rule, "var")


def _median_weights(col: np.ndarray) -> np.ndarray:
    n = col.shape[0]
    med = np.median(col)
    w = np.zeros(n)
    tied = col == med
    if tied.any():
        w[tied] = 1.0 / tied.sum()
        return w
    # even n with distinct middle values: median is their average
    order = np.argsort(col, kind="stable")
    lo_val, hi_val = col[order[n // 2 - 1]], col[order[n // 2]]
    lo_tied, hi_tied = col == lo_val, col == hi_val
    w[lo_tied] += 0.5 / lo_tied.sum()
    w[hi_tied] += 0.5 / hi_tied.sum()
    return w


def median(x, axis: int = 0, keepdims: bool = True) -> Tensor:
    """Per-column median of a 2-D tensor.

    Subgradient: unit mass spread uniformly over elements equal to the
    median; for even counts with distinct middle values each middle
    element gets one half.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or axis != 0 or x.shape[0] == 0:
        raise ShapeError("median", x.shape)
    out = np.median(x.data, axis=0, keepdims=keepdims)

    def rule(g):
        weights = np.stack([_median_weights(x.data[:, j]) for j in range(x.shape[1])], axis=1)
        return (weights * g.reshape(1, -1),)

    return _node(out, (x,), rule, "median")


def softmax(x) -> Tensor:
    """Row-wise softmax of an N x C tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax", x.shape)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (x,), rule, "softmax")


# -- row structure ----------------------------------------------------------

def take_rows(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2 or idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0])):
        raise ShapeError("take_rows", x.shape, idx.shape)

    def rule(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), rule, "take_rows")


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError("slice_rows", x.shape, (start, stop))

    def rule(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _node(x.data[start:stop], (x,), rule, "slice_rows")


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts) or len({p.shape[1] for p in parts}) != 1:
        raise ShapeError("concat_rows", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), parts, rule, "concat_rows")


# -- backward ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Adjoints of a scalar ``root`` with respect to leaves.

    Returns a fresh mapping on each call; the graph itself is never mutated,
    so repeated calls give identical results. Leaves that do not influence
    the root get zero gradients.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    adj: dict[int, np.ndarray] = {}
    if root.requires_grad:
        adj[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = adj.pop(id(node), None) if node._parents else adj.get(id(node))
            if g is None or node._rule is None:
                continue
            for parent, pg in zip(node._parents, node._rule(g)):
                if not parent.requires_grad:
                    continue
                prev = adj.get(id(parent))
                adj[id(parent)] = pg if prev is None else prev + pg
    leaves = list(wrt) if wrt is not None else [n for n in _topo_order(root) if not n._parents and n.requires_grad]
    return {leaf: np.array(adj.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64) for leaf in leaves}


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    analytic = backward(f(leaf), [leaf])[leaf]
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
