"""Dense-array primitives with a small reverse-mode gradient tape.

Every op accepts either plain ``numpy`` arrays or :class:`Tensor` values.
When no argument is a :class:`Tensor` the op returns a plain array and no
graph is built, so the same code path serves frozen inference and
prompt training.

Only arrays explicitly registered through :meth:`GradientTape.watch`
receive gradients. Backbone weights are always passed as plain arrays.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence, Union

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
DOUBLE_DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class UnwatchedError(ValueError):
    """Raised when a gradient is requested for an array the tape never watched."""


class Tensor:
    """A value tracked by a :class:`GradientTape`."""

    __slots__ = ("value", "parents", "tape")

    def __init__(self, value: np.ndarray, parents=(), tape: "GradientTape | None" = None):
        self.value = value
        self.parents = parents  # tuple of (Tensor, vjp)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


ArrayLike = Union[np.ndarray, Tensor]


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else x


def _node(value: np.ndarray, parents: Sequence[tuple[ArrayLike, Callable]]) -> ArrayLike:
    tracked = tuple((p, f) for p, f in parents if isinstance(p, Tensor))
    if not tracked:
        return value
    return Tensor(value, tracked)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class GradientTape:
    """Records which prompt arrays are differentiable and produces their gradients.

    A tape is meant for one loss computation at a time::

        tape = GradientTape()
        prompts = [tape.watch(a) for a in bank.prompts]
        loss = some_function(prompts)
        grads = tape.gradient(loss, prompts)
    """

    def __init__(self):
        self._watched: dict[int, Tensor] = {}

    def watch(self, array: np.ndarray) -> Tensor:
        leaf = Tensor(np.asarray(array), (), self)
        self._watched[id(leaf)] = leaf
        return leaf

    def is_watched(self, x) -> bool:
        return isinstance(x, Tensor) and self._watched.get(id(x)) is x

    def gradient(self, target: ArrayLike, sources: Iterable[ArrayLike]) -> list[np.ndarray]:
        sources = list(sources)
        for s in sources:
            if not self.is_watched(s):
                raise UnwatchedError("gradient requested for an array this tape does not watch")
        if not isinstance(target, Tensor):
            # target does not depend on anything watched
            return [np.zeros_like(s.value) for s in sources]
        if target.value.size != 1:
            raise ValueError(f"target must be scalar, got shape {target.value.shape}")

        order = _topological_order(target)
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or not node.parents:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- elementwise and structural primitives ---------------------------------


def add(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    av, bv = value_of(a), value_of(b)
    return _node(av + bv, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, np.shape(bv))),
    ])


def sub(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    av, bv = value_of(a), value_of(b)
    return _node(av - bv, [
        (a, lambda g: _unbroadcast(g, np.shape(av))),
        (b, lambda g: -_unbroadcast(g, np.shape(bv))),
    ])


def mul(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    av, bv = value_of(a), value_of(b)
    return _node(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, np.shape(av))),
        (b, lambda g: _unbroadcast(g * av, np.shape(bv))),
    ])


def div(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _node(out, [
        (a, lambda g: _unbroadcast(g / bv, np.shape(av))),
        (b, lambda g: _unbroadcast(-g * out / bv, np.shape(bv))),
    ])


def neg(a: ArrayLike) -> ArrayLike:
    return _node(-value_of(a), [(a, lambda g: -g)])


def exp(a: ArrayLike) -> ArrayLike:
    out = np.exp(value_of(a))
    return _node(out, [(a, lambda g: g * out)])


def log(a: ArrayLike) -> ArrayLike:
    av = value_of(a)
    return _node(np.log(av), [(a, lambda g: g / av)])


def sqrt(a: ArrayLike) -> ArrayLike:
    out = np.sqrt(value_of(a))
    return _node(out, [(a, lambda g: g / (2 * out))])


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> ArrayLike:
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(out, [(a, vjp)])


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> ArrayLike:
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), av.dtype.type(1.0 / n))


def matmul(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Batched matrix product over the last two axes (both operands at least 2-D)."""
    av, bv = value_of(a), value_of(b)
    return _node(av @ bv, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)),
    ])


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> ArrayLike:
    av = value_of(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def transpose(a: ArrayLike, axes: tuple[int, ...]) -> ArrayLike:
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(value_of(a), axes), [(a, lambda g: np.transpose(g, inverse))])


def take(a: ArrayLike, index) -> ArrayLike:
    av = value_of(a)
    parts = index if isinstance(index, tuple) else (index,)
    # basic indexing never repeats an element, so plain assignment scatters exactly
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return out

    return _node(av[index], [(a, vjp)])


def concat(parts: Sequence[ArrayLike], axis: int = 0) -> ArrayLike:
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]
        return vjp

    return _node(out, [(p, make_vjp(bounds[i], bounds[i + 1])) for i, p in enumerate(parts)])


def broadcast_to(a: ArrayLike, shape: tuple[int, ...]) -> ArrayLike:
    av = value_of(a)
    return _node(np.broadcast_to(av, shape), [(a, lambda g: _unbroadcast(g, av.shape))])


# -- composite ops with hand-derived adjoints -------------------------------


def softmax(v: ArrayLike, axis: int = -1) -> ArrayLike:
    """Max-subtracted softmax along ``axis``."""
    vv = value_of(v)
    if vv.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = np.exp(vv - vv.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _node(out, [(v, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True)))])


def logsumexp(v: ArrayLike, axis: int = -1) -> ArrayLike:
    vv = value_of(v)
    if vv.shape[axis] < 1:
        raise ValueError("logsumexp over an empty axis")
    m = vv.max(axis=axis, keepdims=True)
    z = np.exp(vv - m)
    s = z.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    probs = z / s
    return _node(out, [(v, lambda g: np.expand_dims(g, axis) * probs)])


def layer_norm(v: ArrayLike, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> ArrayLike:
    """Normalise the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    x = value_of(v)
    gain = value_of(gain)
    bias = value_of(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"gain/bias shape {gain.shape}/{bias.shape} does not match last axis {x.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain + bias

    def vjp(g):
        gx = g * gain
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    return _node(out.astype(x.dtype, copy=False), [(v, vjp)])


def gelu(v: ArrayLike) -> ArrayLike:
    """Exact GELU, ``x * Phi(x)`` with the error-function CDF."""
    x = value_of(v)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)

    return _node(out, [(v, vjp)])


# -- verification oracle ----------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], object], x: np.ndarray,
                               h: float | None = None, richardson: bool = False) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    With ``richardson`` the central differences at ``h`` and ``h/2`` are
    combined as ``(4*D(h/2) - D(h)) / 3``, which cancels the ``h**2`` error
    term. That allows a larger step, and so less roundoff, when gradients
    are small.
    """
    if richardson:
        x = np.asarray(x)
        if h is None:
            h = 2e-3 if x.dtype == np.float64 else 2e-2
        fine = finite_difference_gradient(f, x, h / 2).astype(np.float64)
        coarse = finite_difference_gradient(f, x, h).astype(np.float64)
        return ((4 * fine - coarse) / 3).astype(x.dtype)
    x = np.array(x, copy=True)
    if h is None:
        h = 1e-6 if x.dtype == np.float64 else 1e-3
    if h <= 0:
        raise ValueError("step h must be positive")

    def scalar(arr):
        out = np.asarray(value_of(f(arr)))
        if out.size != 1:
            raise ValueError(f"f must return a scalar, got shape {out.shape}")
        return float(out.reshape(()))

    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar(x)
        flat[i] = orig - h
        down = scalar(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad.astype(x.dtype)


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case error of ``a`` against ``b``, scaled by the larger of their max magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
