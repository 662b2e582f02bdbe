"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure computing the parents' gradients from the output
gradient. :meth:`Tensor.backward` walks that tape in reverse topological order
once and frees it afterwards.

Values are 32-bit floats by default. The :func:`precision` context switches the
default to 64-bit, which is only meant for gradient-check harnesses.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

LOG_FLOOR = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def precision(dtype=np.float64):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable taping, e.g. for validation and inference."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numeric array with an optional gradient slot.

    Image-valued tensors are rank 4, ``(batch, channels, height, width)``;
    per-channel parameters and scalars use lower ranks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        target = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` of every reachable leaf with d(self)/d(leaf).

        Gradients accumulate into existing ``grad`` buffers; use
        :func:`zero_grads` to reset them.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = _freed


def _freed(g):
    raise RuntimeError("graph already freed by backward(); pass retain_graph=True to differentiate twice")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return Tensor._result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def log(a: Tensor) -> Tensor:
    """Natural log; inputs are floored at ``LOG_FLOOR`` so the result stays finite."""
    ad = a.data
    safe = np.maximum(ad, LOG_FLOOR)
    return Tensor._result(np.log(safe), (a,), lambda g: (g / safe * (ad >= LOG_FLOOR),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2 * g * ad,))


# reductions and channel plumbing ----------------------------------------------

def reduce_sum(a: Tensor, mask: Optional[Tensor | np.ndarray] = None) -> Tensor:
    """Sum all elements, or only those where ``mask`` is 1.

    ``mask`` must share ``a``'s spatial extent; its batch and channel axes may
    be 1 and are broadcast.
    """
    if mask is None:
        shape = a.shape
        return Tensor._result(
            np.asarray(a.data.sum(dtype=a.dtype)), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
        )
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.ndim != a.data.ndim or m.shape[-2:] != a.shape[-2:]:
        raise ShapeError(f"reduce_sum: mask shape {m.shape} does not match tensor shape {a.shape}")
    try:
        np.broadcast_shapes(m.shape, a.shape)
    except ValueError:
        raise ShapeError(f"reduce_sum: mask shape {m.shape} does not match tensor shape {a.shape}") from None
    m = m.astype(a.dtype)
    shape = a.shape
    return Tensor._result(
        np.asarray((a.data * m).sum(dtype=a.dtype)), (a,), lambda g: (np.broadcast_to(g * m, shape).copy(),)
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4 or (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside channels")
    ca = a.shape[1]
    return Tensor._result(
        np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:])
    )


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor._result(a.data[:, start:stop], (a,), backward)


def pad_channels(a: Tensor, extra: int) -> Tensor:
    """Append ``extra`` zero channels."""
    if extra == 0:
        return a
    n, c, h, w = a.shape
    zeros = np.zeros((n, extra, h, w), dtype=a.dtype)
    return Tensor._result(np.concatenate([a.data, zeros], axis=1), (a,), lambda g: (g[:, :c],))
