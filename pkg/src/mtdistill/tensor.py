"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation on tensors that require
gradients links the result to its inputs, and ``backward`` replays the
recorded graph in reverse to accumulate gradients for the leaves.
Arrays are 32-bit floats by default; ``float64`` is supported so that
finite-difference gradient checks can run at full precision.

All reductions use numpy's fixed sequential/pairwise order, so forward
results are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# Gradient recording can be suspended (teacher forwards, evaluation).
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording inside its body."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _coerce(data, dtype=None) -> np.ndarray:
    """Convert input to a float ndarray; floats keep their width, the rest
    become the default 32-bit dtype. 0-d arrays stay 0-d."""
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """An n-dimensional array plus the bookkeeping needed for backprop.

    ``data`` is a row-major numpy array. When ``requires_grad`` is set and
    recording is enabled, operations store their parents and a gradient
    function so :func:`backward` can traverse the graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar -----------------------------------------------------

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> dict:
        return backward(self)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _node(data: np.ndarray, parents: Iterable[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap an op result, linking it to its parents when recording.

    ``grad_fn`` maps the upstream gradient to one gradient array (or None)
    per parent. Ops built outside this module (conv, pooling, ...) use the
    same hook.
    """
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    # Python scalars stay weakly typed so float32 operands are not promoted.
    if isinstance(a, Tensor) and _is_scalar(b):
        return _node(a.data + float(b), (a,), lambda g: (g,))
    if isinstance(b, Tensor) and _is_scalar(a):
        return _node(float(a) + b.data, (b,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(a, Tensor) and _is_scalar(b):
        return _node(a.data - float(b), (a,), lambda g: (g,))
    if isinstance(b, Tensor) and _is_scalar(a):
        return _node(float(a) - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(a, Tensor) and _is_scalar(b):
        s = float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,))
    if isinstance(b, Tensor) and _is_scalar(a):
        s = float(a)
        return _node(b.data * s, (b,), lambda g: (g * s,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), grad_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(a, Tensor) and _is_scalar(b):
        s = float(b)
        return _node(a.data / s, (a,), lambda g: (g / s,))
    if isinstance(b, Tensor) and _is_scalar(a):
        s = float(a)
        out = s / b.data

        def grad_scalar(g):
            return (-g * s / (b.data * b.data),)

        return _node(out, (b,), grad_scalar)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant scalar exponent."""
    p = float(exponent)
    out = a.data**p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log; the caller is responsible for keeping inputs positive."""
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# matmul and shape ops
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """2-D matrix product with dL/da = g @ b.T and dL/db = a.T @ g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), grad_fn)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(norm)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def grad_fn(g):
        g = np.asarray(g) / count
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; backward routes the gradient to the first maximal
    element (lowest flat index on ties)."""
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("max supports axis=None or a single integer axis")
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)

    if axes is None:

        def grad_fn(g):
            gx = np.zeros_like(a.data)
            gx.reshape(-1)[int(a.data.argmax())] = np.asarray(g).reshape(-1)[0]
            return (gx,)

    else:
        ax = axes[0]

        def grad_fn(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, ax)
            idx = np.expand_dims(a.data.argmax(axis=ax), ax)
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, idx, g.astype(a.data.dtype, copy=False), axis=ax)
            return (gx,)

    return _node(out, (a,), grad_fn)


def log_softmax(z: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable log-softmax along ``axis`` (max-subtraction)."""
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def grad_fn(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return _node(out, (z,), grad_fn)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the ops that produced one result.

    The tape is built from the recorded graph reachable from ``result``;
    node inputs always precede the node. ``backward`` may run once per
    tape; call :meth:`reset` to run it again.
    """

    def __init__(self, result: Tensor):
        self.result = result
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._consumed = False
        visited = set()
        stack = [(result, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.leaves = [t for t in self.nodes if t.requires_grad and not t._parents]

    def reset(self) -> None:
        self._consumed = False

    def backward(self, upstream: Optional[np.ndarray] = None) -> dict:
        """Reverse-accumulate gradients; returns ``{leaf: grad}``."""
        if self._consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        self._consumed = True
        loss = self.result
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if upstream is None else np.asarray(upstream)
        }
        for t in reversed(self.nodes):
            g = grads.get(id(t))
            if g is None or t._grad_fn is None:
                continue
            parent_grads = t._grad_fn(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        out = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            out[leaf] = g
        return out


def backward(loss: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar loss.

    Returns a map from each reachable leaf tensor to its gradient (also
    stored on ``leaf.grad``). Raises ``ContractError`` for a non-scalar
    loss, a loss detached from any recorded op, or a second call on the
    same result.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or not loss._parents:
        raise ContractError("loss is detached from the tape: nothing to differentiate")
    if loss._backward_done:
        raise ContractError("backward already ran for this loss; build a GradTape and reset() to re-run")
    loss._backward_done = True
    return GradTape(loss).backward()
