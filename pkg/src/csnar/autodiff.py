"""Reverse-mode automatic differentiation over small dense float64 arrays.

Everything is float64 and rank <= 3. Each primitive builds one graph node
holding its parents and a closure that maps the output gradient to parent
gradients. ``backward`` walks the graph once per call and adds the results
into ``Tensor.grad``, so calling it twice accumulates.

The primitive set is deliberately small; composite blocks (attention,
losses) are assembled from these pieces so that every gradient rule stays
individually checkable with ``grad_check``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_check_finite = False


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive received NaN or inf input while finite checking is on."""


def set_debug_finite(enabled: bool) -> None:
    """Toggle per-primitive input finiteness checks (off by default)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """A float64 array plus its accumulated gradient and graph link."""

    __slots__ = ("values", "grad", "_parents", "_bwd")

    def __init__(
        self,
        values,
        _parents: tuple["Tensor", ...] = (),
        _bwd: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max rank 3)")
        self.values = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, leaf={not self._parents})"

    # Operator sugar; scalars go through ``scale`` / constant tensors.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _guard(*tensors: Tensor) -> None:
    if _check_finite:
        for t in tensors:
            if not np.all(np.isfinite(t.values)):
                raise NonFiniteError("non-finite input to primitive")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _guard(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g: np.ndarray):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _guard(a, b)
    _broadcast_check(a, b, "add")

    def bwd(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.values + b.values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _guard(a, b)
    _broadcast_check(a, b, "mul")
    av, bv = a.values, b.values

    def bwd(g: np.ndarray):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return Tensor(av * bv, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _guard(a, b)
    _broadcast_check(a, b, "div")
    av, bv = a.values, b.values

    def bwd(g: np.ndarray):
        return (
            _unbroadcast(g / bv, a.shape),
            _unbroadcast(-g * av / (bv * bv), b.shape),
        )

    return Tensor(av / bv, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    _guard(x)
    c = float(c)

    def bwd(g: np.ndarray):
        return (g * c,)

    return Tensor(x.values * c, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    _guard(x)
    mask = x.values > 0

    def bwd(g: np.ndarray):
        return (g * mask,)

    return Tensor(np.where(mask, x.values, 0.0), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    _guard(x)
    v = x.values
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))

    def bwd(g: np.ndarray):
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT_2PI
        return (g * (cdf + v * pdf),)

    return Tensor(v * cdf, (x,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    _guard(x)
    v = x.values
    m = v.max(axis=-1, keepdims=True) if v.shape[-1] else v
    e = np.exp(v - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, (x,), bwd)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    _guard(x)
    v = x.values
    m = v.max(axis=-1, keepdims=True) if v.shape[-1] else v
    lse = m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True))
    out = v - lse

    def bwd(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (x,), bwd)


def layer_norm_lastdim(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last dim to zero mean, unit variance (no affine)."""
    _guard(x)
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv

    def bwd(g: np.ndarray):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor(y, (x,), bwd)


def embed_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows ``table[ids]``; the backward pass scatter-adds."""
    _guard(table)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup table must be rank 2, got {table.shape}")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
        raise IndexError(f"id {bad} out of range for table with {table.shape[0]} rows")

    def bwd(g: np.ndarray):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(table.values[idx], (table,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    _guard(*parts)
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g: np.ndarray):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor(out, tuple(parts), bwd)


def slice_(x: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    _guard(x)
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"slice axis {axis} invalid for shape {x.shape}")
    slicer = tuple(
        slice(start, stop, step) if d == axis else slice(None) for d in range(x.ndim)
    )

    def bwd(g: np.ndarray):
        gx = np.zeros_like(x.values)
        gx[slicer] = g
        return (gx,)

    return Tensor(x.values[slicer], (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    _guard(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {x.shape}")

    def bwd(g: np.ndarray):
        return (g.T,)

    return Tensor(x.values.T, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0.

    The mask is drawn from the caller's RNG stream, so a fixed generator
    state makes the node (and its gradient) reproducible.
    """
    _guard(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        def bwd_id(g: np.ndarray):
            return (g,)

        return Tensor(x.values, (x,), bwd_id)
    if rng is None:
        raise ValueError("dropout in training mode needs an RNG stream")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g: np.ndarray):
        return (g * keep,)

    return Tensor(x.values * keep, (x,), bwd)


def sum_(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    _guard(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Tensor(out, (x,), bwd)


def sqrt_(x: Tensor) -> Tensor:
    _guard(x)
    root = np.sqrt(x.values)

    def bwd(g: np.ndarray):
        return (g * 0.5 / root,)

    return Tensor(root, (x,), bwd)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "layer_norm_lastdim": layer_norm_lastdim,
    "embed_lookup": embed_lookup,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "dropout": dropout,
    "sum": sum_,
    "sqrt": sqrt_,
}


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name; ``attrs`` become keyword arguments."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive kind {kind!r}") from None
    attrs = attrs or {}
    if kind == "concat":
        return fn(inputs, **attrs)
    if isinstance(inputs, Tensor):
        inputs = (inputs,)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every reachable node.

    ``loss`` must hold a single element. Each call performs one clean pass
    (intermediate contributions are tracked per pass), then adds the result
    into any existing ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._bwd is not None:
            parent_grads = node._bwd(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences at ``x``.

    ``f`` must be a pure scalar-valued function of ``x`` (it may read other
    tensors, whose values are held fixed). Relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.values)

    numeric = np.zeros_like(x.values)
    flat_x = x.values.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x).values)
        flat_x[i] = orig - h
        fm = float(f(x).values)
        flat_x[i] = orig
        flat_n[i] = (fp - fm) / (2.0 * h)

    if analytic.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max())
