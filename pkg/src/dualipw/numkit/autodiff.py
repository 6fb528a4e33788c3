"""Reverse-mode automatic differentiation over small dense computation graphs.

Values are float64 numpy arrays. Operations build a tape implicitly via
parent links; ``backward`` walks the tape once in reverse topological
order. The op set is deliberately minimal: exactly what the ranking,
position-propensity and query-propensity models need.

Module-level flags (``no_grad``, ``unchecked``) are process-global; a
training run is single-threaded by design, so this is safe.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "constant",
    "parameter",
    "no_grad",
    "unchecked",
    "backward",
    "add",
    "mul",
    "div",
    "matmul",
    "affine",
    "elu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "concat",
    "narrow",
    "clip",
]


class AutodiffError(Exception):
    """Base class for tape construction and evaluation errors."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the op."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape construction (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def unchecked() -> Iterator[None]:
    """Disable per-op finiteness checks (hot loops that re-run a graph
    already validated once, e.g. finite-difference sweeps)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A node in the computation graph: a float64 array plus tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """A view of the same values that blocks gradient flow."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _NEG_ONE))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _NEG_ONE))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _NEG_ONE)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_NEG_ONE = Tensor(-1.0)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(op, "produced a non-finite value")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as err:
        raise ShapeError("add", f"{a.shape} + {b.shape}: {err}") from None

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as err:
        raise ShapeError("mul", f"{a.shape} * {b.shape}: {err}") from None

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError as err:
        raise ShapeError("div", f"{a.shape} / {b.shape}: {err}") from None

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * data / b.data, b.data.shape),
        )

    return _node(data, (a, b), vjp, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), vjp, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a broadcast bias row."""
    return add(matmul(x, w), b)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit; the derivative at 0 is taken as 1."""
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    data = np.where(x.data >= 0.0, x.data, neg)

    def vjp(g):
        return (np.where(x.data >= 0.0, g, g * (neg + alpha)),)

    return _node(data, (x,), vjp, "elu")


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _node(data, (x,), vjp, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _node(data, (x,), vjp, "tanh")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (x,), vjp, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _node(data, (x,), vjp, "log")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    data = _softmax(x.data)

    def vjp(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        return ((g - dot) * data,)

    return _node(data, (x,), vjp, "softmax")


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    """Fused log(softmax(x)) over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    data = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _node(data, (x,), vjp, "log_softmax")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _node(data, (x,), vjp, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError("reshape", str(err)) from None

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _node(data, (x,), vjp, "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat", "empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError("concat", str(err)) from None
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(parts), vjp, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError("narrow", f"slice [{start}:{start + length}) outside axis of size {x.data.shape[axis]}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _node(data, (x,), vjp, "narrow")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the range."""
    data = np.clip(x.data, lo, hi)

    def vjp(g):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _node(data, (x,), vjp, "clip")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every reachable node
    that requires gradients. ``loss`` must be a scalar."""
    if loss.data.shape != ():
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones(())

    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g
