"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to parent gradients. The
graph is rebuilt on every forward pass and released by :meth:`Tensor.backward`,
so calling ``backward`` twice on the same graph raises :class:`GraphError`.

Data is held in numpy arrays. Python sequences and scalars become 32-bit
floats; floating-point numpy arrays keep their dtype, which lets the gradient
checker run the same code in float64.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericError

DEFAULT_DTYPE = np.float32

_counter = itertools.count()
_local = threading.local()


def _ctx():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.recorders = []
        _local.anomaly = 0
    return _local


def is_grad_enabled() -> bool:
    return _ctx().grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextlib.contextmanager
def record_ops():
    """Collect ``(op_name, output_shape)`` for every op executed in the block."""
    log: list[tuple[str, tuple[int, ...]]] = []
    ctx = _ctx()
    ctx.recorders.append(log)
    try:
        yield log
    finally:
        ctx.recorders.remove(log)


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NumericError` as soon as any op produces a non-finite value."""
    ctx = _ctx()
    ctx.anomaly += 1
    try:
        yield
    finally:
        ctx.anomaly -= 1


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.floating)) and np.issubdtype(data.dtype, np.floating):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "_released")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_counter)
        self._released = False

    # -- construction of graph nodes -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._seq = next(_counter)
        out._released = False
        ctx = _ctx()
        if ctx.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        for log in ctx.recorders:
            log.append((op, data.shape))
        if ctx.anomaly and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite output from op '{op}'")
        return out

    # -- basic properties ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward --------------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self._released:
            raise GraphError(f"graph of '{self._op}' was already released by an earlier backward()")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        if self._backward is None:
            self.grad = grad.copy() if self.grad is None else self.grad + grad
            return

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._released:
                raise GraphError(f"graph of '{node._op}' was already released by an earlier backward()")
            if node._backward is None:
                continue
            nodes.append(node)
            stack.extend(node._parents)
        # Sequence numbers grow with execution, so this is exact reverse order.
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:
            g = pending.pop(id(node), None)
            parents = node._parents
            if g is not None:
                pgrads = node._backward(g)
                for p, pg in zip(parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p._backward is None:
                        pg = np.asarray(pg, dtype=p.data.dtype)
                        p.grad = pg.copy() if p.grad is None else p.grad + pg
                    else:
                        key = id(p)
                        pending[key] = pg if key not in pending else pending[key] + pg
            node._backward = None
            node._parents = ()
            node._released = True

    # -- elementwise arithmetic ------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def backward(g):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

            return Tensor._make(a.data + b.data, (a, b), backward, "add")
        shape = self.shape
        return Tensor._make(self.data + other, (self,), lambda g: (_unbroadcast(g, shape),), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def backward(g):
                return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

            return Tensor._make(a.data - b.data, (a, b), backward, "sub")
        shape = self.shape
        return Tensor._make(self.data - other, (self,), lambda g: (_unbroadcast(g, shape),), "sub")

    def __rsub__(self, other):
        shape = self.shape
        return Tensor._make(other - self.data, (self,), lambda g: (_unbroadcast(-g, shape),), "rsub")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def backward(g):
                return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

            return Tensor._make(a.data * b.data, (a, b), backward, "mul")
        shape = self.shape
        return Tensor._make(self.data * other, (self,), lambda g: (_unbroadcast(g * other, shape),), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def backward(g):
                ga = _unbroadcast(g / b.data, a.shape)
                gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                return ga, gb

            return Tensor._make(a.data / b.data, (a, b), backward, "div")
        shape = self.shape
        return Tensor._make(self.data / other, (self,), lambda g: (_unbroadcast(g / other, shape),), "div")

    def __rtruediv__(self, other):
        a = self

        def backward(g):
            return (_unbroadcast(-g * other / (a.data * a.data), a.shape),)

        return Tensor._make(other / self.data, (self,), backward, "rdiv")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self

        def backward(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._make(self.data**exponent, (self,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary functions -------------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,), "exp")

    def log(self):
        a = self
        return Tensor._make(np.log(self.data), (self,), lambda g: (g / a.data,), "log")

    def sigmoid(self):
        out_data = _sigmoid(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data * (1 - out_data),), "sigmoid")

    def astype(self, dtype):
        """Cast to ``dtype``; the gradient is cast back to the source dtype."""
        src = self.data.dtype
        if np.dtype(dtype) == src:
            return self
        return Tensor._make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),), "astype")

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * (1 - out_data * out_data),), "tanh")

    # -- reductions ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swapaxes(self, a: int, b: int):
        return Tensor._make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),), "swapaxes")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        if isinstance(index, Tensor):
            index = index.data
        shape, dtype = self.shape, self.dtype

        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[index]), (self,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create a graph node for a custom op whose ``backward(g)`` returns one gradient per parent."""
    return Tensor._make(data, parents, backward, op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, with numpy broadcasting of leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(data, tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(data, tensors, backward, "concat")


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def relu(x: Tensor) -> Tensor:
    return x.relu()


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def iter_leaves(root: Tensor) -> Iterable[Tensor]:
    """Yield every leaf that ``root`` depends on through a live graph."""
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is None:
            yield node
        else:
            stack.extend(node._parents)
