"""Reverse-mode differentiable dense arrays.

A :class:`Tensor` wraps a numpy array and, when it takes part in a
computation that needs gradients, records its parents and a closure that maps
the output gradient to parent gradients.  :func:`backward` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from inklpose.errors import NumericError, ShapeError, StateError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. ``"float64"``)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class FlopCounter:
    """Accumulates floating point operation estimates while active."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    stack = _get("flops", None)
    if stack is None:
        stack = _state.flops = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def add_flops(op: str, n: int) -> None:
    stack = _get("flops", None)
    if stack:
        for counter in stack:
            counter.add(op, n)


class Tensor:
    """Dense real array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(default_dtype(), copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in functional ----------------
    def __add__(self, other):
        from inklpose.substrate import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from inklpose.substrate import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from inklpose.substrate import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from inklpose.substrate import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from inklpose.substrate import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from inklpose.substrate import functional as F
        return F.div(other, self)

    def __neg__(self):
        from inklpose.substrate import functional as F
        return F.mul(self, -1.0)

    def __pow__(self, p):
        from inklpose.substrate import functional as F
        return F.power(self, p)

    def __matmul__(self, other):
        from inklpose.substrate import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from inklpose.substrate import functional as F
        return F.index(self, idx)

    def sum(self, axis=None, keepdims=False):
        from inklpose.substrate import functional as F
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from inklpose.substrate import functional as F
        return F.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from inklpose.substrate import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from inklpose.substrate import functional as F
        return F.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of an op; record the graph edge if needed."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that needs it.

    Leaf gradients accumulate across calls on different graphs; calling twice
    on the same loss is an error.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already ran on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor that requires grad")
    order = _toposort(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None or node._backward is not None else node.grad + g
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    loss._consumed = True


def check_finite(t: Tensor | np.ndarray, name: str) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
