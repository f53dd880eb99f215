"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every forward call records nodes on a dynamic tape; ``backward`` walks the
ancestors of a scalar loss in exact reverse creation order. Leaf gradients
accumulate across calls until :meth:`Tensor.zero_grad`.

Only what the fusion model, its losses and the optimizer need is provided:
broadcasting arithmetic, batched matmul, reductions, row softmax, layer
normalization, SELU, pairwise Euclidean distances and a masked
log-sum-exp used by the Cox partial likelihood.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

# SELU constants (Klambauer et al.), 16 significant digits.
SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

_counter = itertools.count()
_state = {"grad_enabled": True, "check_finite": True}


class NonFiniteError(FloatingPointError):
    """Raised when a node would hold NaN or Inf in checked mode."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


class Tensor:
    """A float64 array with an optional slot in the autodiff graph."""

    __array_priority__ = 1000
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if _state["check_finite"] and not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(value)
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.value.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # collect ancestors; ids are creation order so sorting gives a topological order
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.backward_fn is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)),
                 "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    out = np.sqrt(a.value)

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _node(out, (a,), grad_fn, "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.value > floor
    return _node(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,), "clamp_min")


def selu(a: Tensor) -> Tensor:
    x = a.value
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = SELU_LAMBDA * np.where(pos, x, SELU_ALPHA * (ex - 1.0))
    return _node(out, (a,),
                 lambda g: (g * SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * ex),), "selu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with ``np.matmul`` batching; both operands at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)
    n = len(tensors)
    return _node(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def take(a: Tensor, index, axis: int = -1) -> Tensor:
    """Select ``index`` (int array) along ``axis``."""
    index = np.asarray(index)

    def grad_fn(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(np.take(a.value, index, axis=axis), (a,), grad_fn, "take")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- fused ops


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), grad_fn, "softmax_rows")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def grad_fn(g):
        gx = gb = gg = None
        if a.requires_grad:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _node(out, (a, gain, bias), grad_fn, "layer_norm")


def pairwise_distances(x: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    The gradient of a zero distance (including the diagonal) is taken as 0.
    """
    if x.ndim != 2:
        raise ShapeError(f"pairwise_distances expects a 2-D tensor, got {x.shape}")
    v = x.value
    diff = v[:, None, :] - v[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)
        w = w + w.T
        return ((w.sum(axis=1)[:, None] * v) - w @ v,)

    return _node(d, (x,), grad_fn, "pairwise_distances")


def masked_logsumexp(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a) over entries where ``mask`` is true)) along ``axis``.

    Rows with an empty mask are not allowed.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_logsumexp: empty mask along reduction axis")
    masked = np.where(mask, a.value, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def grad_fn(g):
        return (np.expand_dims(g, axis) * w,)

    return _node(out, (a,), grad_fn, "masked_logsumexp")


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` rebuilds the graph from the current values of ``params`` and returns a
    scalar. The error for each coordinate is ``|num - ana| / max(1, |ana|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            if not p.value.flags.c_contiguous:
                p.value = np.ascontiguousarray(p.value)
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = ana.reshape(-1)[i]
                worst = max(worst, abs(num - a) / max(1.0, abs(a)))
    return worst
