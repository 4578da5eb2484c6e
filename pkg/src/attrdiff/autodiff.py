"""Dense float64 tensors with a reverse-mode tape.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``backward`` walks the nodes in reverse
topological order and then drops the graph, so each forward pass owns its
own tape.

Shapes never broadcast except tensor-with-Python-scalar. Use ``expand`` to
broadcast explicitly; its backward sums over the expanded axes.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    # any NaN/Inf poisons the sum; a finite sum of huge values overflowing is treated as an error too
    if not math.isfinite(float(np.sum(data))):
        raise NonFiniteError(f"non-finite output from op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # never update in place: g may be shared between parents or be a broadcast view
    t.grad = g if t.grad is None else t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand)")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + float(b), (a,), "add_scalar", lambda g: _accum(a, g))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")

    def fn(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape(a, b, "sub")

    def fn(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", fn)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), "mul_scalar", lambda g: _accum(a, g * s))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape(a, b, "mul")

    def fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), "exp", lambda g: _accum(a, g * out_data))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accum(a, g * mask))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: _accum(a, g * (1.0 - y * y)))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: _accum(a, g * mask))


def const_mul(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (no gradient to ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"const_mul: shapes {a.shape} and {c.shape} differ")
    return _make(a.data * c, (a,), "const_mul", lambda g: _accum(a, g * c))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal leading dims."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def fn(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), "matmul", fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return _make(np.swapaxes(a.data, -1, -2), (a,), "transpose",
                 lambda g: _accum(a, np.swapaxes(g, -1, -2)))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: bad axes {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "permute",
                 lambda g: _accum(a, np.transpose(g, inv)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _make(out, (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape`` following numpy rules (leading dims may be added)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: {a.shape} -> {shape}") from exc
    lead = len(shape) - a.ndim
    sum_axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(a.shape) if d == 1 and shape[lead + i] != 1
    )

    def fn(g):
        r = g.sum(axis=sum_axes, keepdims=True) if sum_axes else g
        _accum(a, r.reshape(a.shape))

    return _make(np.ascontiguousarray(out), (a,), "expand", fn)


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), "sum",
                 lambda g: _accum(a, np.full(a.shape, float(g))))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), "mean_all",
                 lambda g: _accum(a, np.full(a.shape, float(g) / n)))


def mean(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis; the axis is removed."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError("mean over empty axis")

    def fn(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))

    return _make(a.data.mean(axis=axis), (a,), "mean", fn)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim

    def fn(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(a.data.sum(axis=axis), (a,), "sum_axis", fn)


# ---------------------------------------------------------------- normalisation / probabilities

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), "softmax", fn)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        _accum(a, g - p * g.sum(axis=-1, keepdims=True))

    return _make(y, (a,), "log_softmax", fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _make(y, (a,), "layer_norm", fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (N, K) against integer ``labels`` (N,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()
    p = np.exp(z - lse[:, None])

    def fn(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        _accum(logits, d * (float(g) / n))

    return _make(np.array(loss), (logits,), "cross_entropy", fn)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis, averaged over the rest."""
    _same_shape(mu, logvar, "kl_diag_gaussian")
    ev = np.exp(logvar.data)
    per = 0.5 * (mu.data ** 2 + ev - 1.0 - logvar.data).sum(axis=-1)
    m = per.size

    def fn(g):
        s = float(g) / m
        _accum(mu, mu.data * s)
        _accum(logvar, 0.5 * (ev - 1.0) * s)

    return _make(np.array(per.mean()), (mu, logvar), "kl_diag_gaussian", fn)


# ---------------------------------------------------------------- indexing

def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` with gradient scattered back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")

    def fn(g):
        if table.requires_grad:
            acc = np.zeros(table.shape)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, acc)

    return _make(table.data[ids], (table,), "embedding", fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {a.shape}")

    def fn(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        _accum(a, full)

    return _make(a.data[..., start:stop].copy(), (a,), "slice", fn)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    axis = axis % parts[0].ndim
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def fn(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(out, parts, "concat", fn)


# ---------------------------------------------------------------- reverse pass

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Interior gradients are dropped afterwards, and so is the graph unless
    ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        _check_finite(node.grad, f"grad of {node.op}")
        node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            if not retain_graph:
                node._parents = ()
                node._backward = None


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` (zeros where unreachable). Clears their ``.grad`` first."""
    wrt = list(wrt)
    for w in wrt:
        w.grad = None
    backward(loss)
    return [w.grad if w.grad is not None else np.zeros(w.shape) for w in wrt]


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1e-8, |numeric|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if out.requires_grad:
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(point.copy())).item()
        flat[i] = old - h
        fm = f(Tensor(point.copy())).item()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite value during finite differences")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
