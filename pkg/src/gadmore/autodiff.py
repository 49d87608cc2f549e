"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the compute graph is a `Tensor` wrapping an ndarray. Ops
record a vector-Jacobian product per parent; `backward()` on a scalar
output accumulates gradients into every reachable leaf with
``requires_grad=True``. When no input of an op requires a gradient the op
returns a plain constant and records nothing, so inference-time code pays
no graph-building cost.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_NORM_FLOOR = 1e-300  # denominator guard; exact for any norm that matters


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjps = _vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        Only defined for scalar outputs (losses).
        """
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    # -- operator sugar -------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _vjps=tuple(vjps))
    return Tensor(value)


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    k = float(exponent)
    return _make(
        a.value**k,
        (a,),
        (lambda g: g * k * a.value ** (k - 1.0),),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T, (a,), (lambda g: g.T,))


# -- reductions & shaping -----------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(value, (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amin(a, axis: int) -> Tensor:
    """Minimum over one axis; gradient flows to the first argmin per lane."""
    a = as_tensor(a)
    idx = np.argmin(a.value, axis=axis)
    value = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return out

    return _make(value, (a,), (vjp,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _make(value, ts, tuple(make_vjp(i) for i in range(len(ts))))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def take(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return out

    return _make(a.value[key], (a,), (vjp,))


# -- elementwise nonlinearities ------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _make(e, (a,), (lambda g: g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    s = np.sqrt(a.value)
    return _make(s, (a,), (lambda g: g / (2.0 * np.maximum(s, _NORM_FLOOR)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _make(t, (a,), (lambda g: g * (1.0 - t * t),))


def arctanh(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.arctanh(a.value), (a,), (lambda g: g / (1.0 - a.value * a.value),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.value), (a,), (lambda g: -g * np.sin(a.value),))


_DERIV_MARGIN = 2e-12  # ~ (1 + 1e-12)**2 - 1; caps arccos/arccosh slopes at the branch points


def arccos(a) -> Tensor:
    """arccos with the argument clamped to [-1, 1].

    Values are exact on the closed domain; the derivative is evaluated as
    if the argument were kept a margin of ~1e-12 inside it, so coincident
    or antipodal points yield large-but-finite gradients instead of NaN.
    """
    a = as_tensor(a)
    x = np.clip(a.value, -1.0, 1.0)
    return _make(
        np.arccos(x),
        (a,),
        (lambda g: -g / np.sqrt(np.maximum(1.0 - x * x, _DERIV_MARGIN)),),
    )


def arccosh(a) -> Tensor:
    """arccosh with the argument floored at 1; derivative guarded as in arccos."""
    a = as_tensor(a)
    x = np.maximum(a.value, 1.0)
    return _make(
        np.arccosh(x),
        (a,),
        (lambda g: g / np.sqrt(np.maximum(x * x - 1.0, _DERIV_MARGIN)),),
    )


def arctan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    denom = np.maximum(y.value * y.value + x.value * x.value, _NORM_FLOOR)
    return _make(
        np.arctan2(y.value, x.value),
        (y, x),
        (
            lambda g: _unbroadcast(g * x.value / denom, y.shape),
            lambda g: _unbroadcast(-g * y.value / denom, x.shape),
        ),
    )


def softplus(a) -> Tensor:
    """log(1 + exp(a)), overflow-safe; gradient is the logistic sigmoid."""
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.value)

    def vjp(g):
        v = a.value
        pos = v >= 0
        ev = np.exp(np.where(pos, -v, v))  # exp of a non-positive number, never overflows
        sig = np.where(pos, 1.0 / (1.0 + ev), ev / (1.0 + ev))
        return g * sig

    return _make(value, (a,), (vjp,))


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; gradient passes through wherever the input is inside
    the (closed) interval and is zero where the clamp is active."""
    a = as_tensor(a)
    value = np.clip(a.value, lo, hi)
    inside = np.ones_like(a.value, dtype=bool)
    if lo is not None:
        inside &= a.value >= lo
    if hi is not None:
        inside &= a.value <= hi
    return _make(value, (a,), (lambda g: g * inside,))


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along an axis; zero rows get zero gradient."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=keepdims))

    def vjp(g):
        nk = n if keepdims else np.expand_dims(n, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        return gk * a.value / np.maximum(nk, _NORM_FLOOR)

    return _make(n, (a,), (vjp,))


# -- composites ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = sub(a, np.max(a.value, axis=axis, keepdims=True))
    e = exp(shift)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = sub(a, np.max(a.value, axis=axis, keepdims=True))
    return sub(shift, log(tsum(exp(shift), axis=axis, keepdims=True)))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy between sigmoid(logits) and 0/1 targets."""
    z = as_tensor(logits)
    t = as_tensor(targets)
    return sub(softplus(z), mul(z, t))


def blend(mask: np.ndarray, a, b) -> Tensor:
    """mask*a + (1-mask)*b with a constant 0/1 mask (a branchless `where`)."""
    m = np.asarray(mask, dtype=np.float64)
    return add(mul(a, m), mul(b, 1.0 - m))
