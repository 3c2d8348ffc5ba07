"""A small dense tensor with reverse-mode gradients.

Data is always float64. Each op returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Only leaves with ``requires_grad`` keep a ``.grad``; calling ``backward``
twice without zeroing adds the second result onto the first.

Broadcasting is deliberately limited to the named ops (``add_bias``,
``broadcast_rows``, batched ``matmul`` against a 2-D right operand).
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import EmptyAxis, LfxError, NonFiniteValue, ShapeMismatch

MAX_RANK = 4

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        _check(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                _raise_not_scalar(self.shape)
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} vs output {self.shape}")

        pending = {id(self): grad}
        for node in reversed(_topological(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _raise_not_scalar(shape):
    raise ShapeMismatch(f"expected a single-element tensor, got shape {shape}")


def _check(arr: np.ndarray) -> None:
    if arr.ndim > MAX_RANK:
        raise ShapeMismatch(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    if not np.isfinite(arr).all():
        raise NonFiniteValue("non-finite value in tensor")


def _topological(root: Tensor) -> list[Tensor]:
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check(data)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else data.copy(order="C")
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` (shape ``(n,)``) broadcast along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeMismatch(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    n = b.shape[0]
    return _make(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _make(x.data * cdf, (x,), lambda g: (g * _gelu_grad(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n) -> (..., m, n)``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot contract {a.shape} with {b.shape}")
    k, n = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    # einsum's plain loop computes each row the same way wherever it sits, unlike blocked BLAS,
    # so token-wise layers stay exactly permutation-equivariant
    return _make(np.einsum("...k,kn->...n", a.data, b.data), (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return add_bias(y, bias) if bias is not None else y


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _make(out.copy(), (x,), lambda g: (g.reshape(src),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat_last: leading shapes {a.shape[:-1]} and {b.shape[:-1]} differ")
    p = a.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :p], g[..., p:]))


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward)


def broadcast_rows(q: Tensor, n: int) -> Tensor:
    """``(B, D) -> (B, n, D)``: every row slice equals ``q``."""
    if q.ndim != 2:
        raise ShapeMismatch(f"broadcast_rows expects (B, D), got {q.shape}")
    if n < 1:
        raise EmptyAxis("broadcast_rows needs n >= 1")
    out = np.repeat(q.data[:, None, :], n, axis=1)
    return _make(out, (q,), lambda g: (g.sum(axis=1),))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(x: Tensor, axis: int) -> int:
    axis = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptyAxis(f"cannot reduce empty axis {axis} of {x.shape}")
    return axis


def reduce_max(x: Tensor, axis: int = 1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    axis = _norm_axis(x, axis)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward)


def reduce_mean(x: Tensor, axis: int = 1) -> Tensor:
    axis = _norm_axis(x, axis)
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    # summing in sorted order makes the result independent of token order, bit for bit
    ordered = np.ascontiguousarray(np.sort(np.moveaxis(x.data, axis, -1), axis=-1))
    return _make(ordered.sum(axis=-1) / n, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int | None = None) -> Tensor:
    """Mean cross-entropy over all positions; ``labels`` has the logits' leading shape."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"labels {labels.shape} vs logits {logits.shape}")
    k = logits.shape[-1]
    z = logits.data.reshape(-1, k)
    y = labels.reshape(-1).astype(np.intp)
    keep = np.ones(y.shape, dtype=bool) if ignore_label is None else y != ignore_label
    if not keep.any():
        raise EmptyAxis("every position is ignored")
    if (y[keep] < 0).any() or (y[keep] >= k).any():
        raise LfxError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    count = rows.size
    loss = -logp[rows, y[rows]].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, y[rows]] -= 1.0
        p[~keep] = 0.0
        return ((float(g) / count) * p.reshape(logits.shape),)

    return _make(np.array(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1]."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"targets {t.shape} vs logits {logits.shape}")
    z = logits.data
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def backward(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((float(g) / n) * (p - t),)

    return _make(np.array(loss), (logits,), backward)
