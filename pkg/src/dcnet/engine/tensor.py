"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that
require gradients records a node holding its parents and a closure that maps
the output cotangent to parent cotangents. :meth:`Tensor.backward` walks the
recorded graph once, in reverse topological order, and then releases it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_CHECK_FINITE = False


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (non-scalar loss, stale graph)."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph recording, e.g. inside a custom op's backward."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, True
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Verify every op output is finite while the block is active (slow)."""
    global _CHECK_FINITE
    old, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Create an op output; ``backward(g)`` returns one cotangent per parent."""
        out = Tensor.__new__(Tensor)
        if data.dtype != _DTYPE:
            data = data.astype(_DTYPE)
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite values produced by a forward op")
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor.make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

        return Tensor.make(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = other

            def backward_scalar(g):
                return (g * c,)

            return Tensor.make(self.data * _DTYPE.type(c), (self,), backward_scalar)
        other = _wrap(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor.make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor.make(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        other = _wrap(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor.make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p: float):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        x = self.data

        def backward(g):
            return (g * p * x ** (p - 1),)

        return Tensor.make(x**p, (self,), backward)

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self, other

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor.make(a.data @ b.data, (a, b), backward)

    # -- reductions and shape ops ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor.make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor.make(np.asarray(self.data[idx]), (self,), backward)

    def exp(self):
        y = np.exp(self.data)
        return Tensor.make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor.make(np.log(x), (self,), lambda g: (g / x,))

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        The graph is released afterwards; a second call raises GraphError.
        """
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        seed = np.ones(self.shape, dtype=self.data.dtype)
        for node, g in _propagate([self], [seed], stop=()).values():
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
        _release([self])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(roots: Sequence[Tensor], stop: set[int]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(roots, seeds, stop: Iterable[Tensor]) -> dict[int, tuple[Tensor, np.ndarray]]:
    """Reverse sweep; returns ``{id: (node, cotangent)}`` for terminal nodes.

    Terminal nodes are leaves and members of ``stop``. Each interior node's
    backward closure runs exactly once.
    """
    stop_ids = {id(s) for s in stop}
    order = _topo_order(roots, stop_ids)
    grads: dict[int, np.ndarray] = {}
    for r, s in zip(roots, seeds):
        grads[id(r)] = grads[id(r)] + s if id(r) in grads else s
    out: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if node._backward is None or id(node) in stop_ids:
            out[id(node)] = (node, g)
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
    return out


def _release(roots: Sequence[Tensor]) -> None:
    stack = list(roots)
    while stack:
        node = stack.pop()
        if node._backward is None:
            continue
        stack.extend(node._parents)
        node._backward = None
        node._parents = ()
        node._consumed = True


def grad(outputs, inputs: Sequence[Tensor], grad_outputs=None) -> list[np.ndarray]:
    """Vector-Jacobian products of ``outputs`` w.r.t. ``inputs``.

    Nothing is written to ``.grad`` and the graph is left intact, so the same
    recorded forward can be differentiated again. Unreachable inputs get zeros.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if grad_outputs is None:
        for o in outputs:
            if o.data.size != 1:
                raise GraphError("grad_outputs required for non-scalar outputs")
        grad_outputs = [np.ones(o.shape, dtype=o.data.dtype) for o in outputs]
    elif isinstance(grad_outputs, np.ndarray):
        grad_outputs = [grad_outputs]
    live = [(o, np.asarray(g, dtype=o.data.dtype)) for o, g in zip(outputs, grad_outputs) if o.requires_grad]
    result = [np.zeros(t.shape, dtype=t.data.dtype) for t in inputs]
    if not live:
        return result
    got = _propagate([o for o, _ in live], [g for _, g in live], stop=inputs)
    for i, t in enumerate(inputs):
        if id(t) in got:
            result[i] = got[id(t)][1]
    return result


# -- free functions -----------------------------------------------------------


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def exp2(x: Tensor) -> Tensor:
    """2**x, the positivity map used for scale parameters."""
    y = np.exp2(x.data)
    ln2 = np.log(2.0)
    return Tensor.make(y, (x,), lambda g: (g * y * ln2,))
