"""Dense tensors with tape-free reverse-mode autodiff.

Every op records its parents and a closure that pushes the output gradient
back into them. ``Tensor.backward`` walks the graph in reverse topological
order. Arrays are plain numpy arrays in row-major layout.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DTYPES = {"single": np.float32, "double": np.float64}
_state = threading.local()


def _get(attr, default):
    return getattr(_state, attr, default)


def default_dtype() -> type:
    return _DTYPES[_get("precision", "single")]


@contextlib.contextmanager
def precision(mode: str):
    """Switch the dtype used for newly created tensors.

    ``"single"`` is the training mode; ``"double"`` is meant for gradient
    verification where finite differences need the extra digits.
    """
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _get("precision", "single")
    _state.precision = mode
    try:
        yield
    finally:
        _state.precision = prev


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.size == 0:
            raise ValueError("tensor extents must be positive")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = ""

    # -- construction -------------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- properties -----------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological(root: Tensor):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype or default_dtype())
    t = Tensor.__new__(Tensor)
    t.data, t.grad, t.requires_grad = arr, None, False
    t._parents, t._backward, t.op = (), None, "const"
    return t


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    with np.errstate(all="ignore"):  # non-finite results raise in _make
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    return Tensor._make(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    return Tensor._make(out, (a,), lambda g: a._accumulate(g / a.data), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: a._accumulate(g * 0.5 / out), "sqrt")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: a._accumulate(g * sign), "abs")


def square(a: Tensor) -> Tensor:
    return Tensor._make(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * g * a.data), "square")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` with a constant floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.data.dtype))
    return Tensor._make(out, (a,), lambda g: a._accumulate(g * keep), "maximum")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return Tensor._make(a.data * keep, (a,), lambda g: a._accumulate(g * keep), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor._make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: a._accumulate(g.reshape(a.data.shape)), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return Tensor._make(out, (a,), lambda g: a._accumulate(g.transpose(inv)), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return Tensor._make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 1):
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    pieces, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + n)
        pieces.append(_slice(a, tuple(sl)))
        lo += n
    return pieces


def _slice(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    return Tensor._make(out, (a,), backward, "slice")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")
