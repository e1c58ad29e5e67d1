"""Dense tensors with reverse-mode autodiff over numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor; ``backward(loss)`` materialises the tape (the reverse topological
order of recorded applications) and replays it once, accumulating ``.grad``
on every reachable leaf that has ``requires_grad``. The graph is freed as it
is consumed, so a second backward through the same tensors raises instead of
silently recomputing garbage.

Scalar precision defaults to float32 for training; gradient-check code runs
under ``using_dtype(np.float64)`` because central finite differences are not
trustworthy at 32-bit.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported scalar dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default scalar precision."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; ops return detached tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(on: bool) -> None:
    """Assert finiteness of every primitive output (test/debug builds)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(on)


class Tensor:
    """n-dimensional float array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None
        self._freed = False
        self._done = False

    # --- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # --- operators (implemented in functional.py, bound at import) -----------

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)


def make_result(out_data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap a primitive's output, attaching the backward closure when taped."""
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def topo_order(root: Tensor):
    """The tape: tensors reachable from ``root``, in topological order.

    Iterative post-order so arbitrarily deep graphs never hit the Python
    recursion limit.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a single scalar. The graph is freed while it is consumed;
    calling backward a second time on the same (sub)graph raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this tensor; rebuild the graph first")
    if loss._freed:
        raise RuntimeError("graph was freed by an earlier backward; rebuild it first")

    order = topo_order(loss)
    for node in order:
        if node._freed:
            raise RuntimeError(
                f"graph node '{node._op}' was freed by an earlier backward; rebuild the graph"
            )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf (or detached intermediate): accumulate if marked
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        # consume the tape as we go
        node._backward = None
        node._parents = ()
        node._freed = True
    loss._done = True


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
