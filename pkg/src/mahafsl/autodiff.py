"""Reverse-mode differentiation on a tape of numpy operations.

Values are float64 numpy arrays wrapped in :class:`Tensor`. Operations run
eagerly; when a :class:`GradTape` is active and at least one input requires a
gradient, the result is appended to the tape together with a closure that maps
the output adjoint to input adjoints. :func:`backward` replays the tape in
reverse creation order, which is a reverse topological order by construction.

Outside a tape every op is plain numpy, so inference pays no bookkeeping cost.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = sum_(w * w)
    >>> backward(tape, loss)[w]
    array([[2., 4.]])
"""
import threading
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_state = threading.local()


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_vjp", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        v = np.array(value, dtype=np.float64)
        v.flags.writeable = False
        self.value = v
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and only the innermost one records.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Optional[GradTape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    out = Tensor(value)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


class Gradients(dict):
    """Mapping from leaf :class:`Tensor` to its gradient array."""


def backward(tape: GradTape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Leaves listed in ``wrt`` that the loss does not depend on get zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: Dict[int, np.ndarray] = {}
    owners: Dict[int, Tensor] = {}
    if loss.requires_grad:
        adj[id(loss)] = np.ones_like(loss.value)
        owners[id(loss)] = loss
    done = set()
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        done.add(id(node))
        for parent, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in done:
                raise ContractError("adjoint reached an already-propagated node; tape order is broken")
            if key in adj:
                adj[key] = adj[key] + gp
            else:
                adj[key] = gp
                owners[key] = parent
    out = Gradients()
    for key, g in adj.items():
        t = owners[key]
        if t.is_leaf:
            out[t] = np.asarray(g).reshape(t.shape)
    for t in wrt or ():
        if t not in out:
            out[t] = np.zeros_like(t.value)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def gather_rows(a, idx) -> Tensor:
    """Rows ``a[idx]`` for an integer index array (duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp).ravel()
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.value[idx], (a,), vjp)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows needs at least one block")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=0)
    return _record(value, parts, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def pick(a, idx) -> Tensor:
    """Per-row element ``a[i, idx[i]]`` as a vector."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _record(a.value[rows, idx], (a,), vjp)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def cholesky_solve(A, B) -> Tensor:
    """``A⁻¹ B`` for symmetric positive definite ``A`` via Cholesky.

    The adjoint treats ``A`` as a general matrix (``-A⁻¹ G Xᵀ``), which is the
    right derivative whenever ``A`` stays symmetric along the path being
    differentiated.
    """
    A, B = as_tensor(A), as_tensor(B)
    Av = A.value
    if Av.ndim != 2 or Av.shape[0] != Av.shape[1]:
        raise DimensionError(f"cholesky_solve needs a square matrix, got {Av.shape}")
    if B.shape[0] != Av.shape[0]:
        raise DimensionError(f"cholesky_solve rhs has {B.shape[0]} rows for a {Av.shape[0]}-square system")
    tol = 1e-10 * max(1.0, float(np.max(np.abs(Av))) if Av.size else 1.0)
    if Av.size and np.max(np.abs(Av - Av.T)) > tol:
        raise ContractError("cholesky_solve needs a symmetric matrix")
    L = kernels.cholesky(Av)
    X = kernels.cho_solve(L, B.value)

    def vjp(g):
        gB = kernels.cho_solve(L, g)
        gA = -(gB.reshape(gB.shape[0], -1) @ X.reshape(X.shape[0], -1).T)
        return gA, gB

    return _record(X, (A, B), vjp)


# --------------------------------------------------------------------------
# row-wise softmax and losses
# --------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    return scale(sum_(pick(log_softmax_rows(logits), labels)), -1.0 / len(labels))


# --------------------------------------------------------------------------
# convolutional layers
# --------------------------------------------------------------------------


def conv2d(x, w, b, pad: int = 1) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv = x.value, w.value

    def vjp(g):
        return kernels.conv2d_backward(xv, wv, g, pad)

    return _record(kernels.conv2d(xv, wv, b.value, pad), (x, w, b), vjp)


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    out, arg = kernels.maxpool2x2(x.value)
    shape = x.shape
    return _record(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, arg, shape),))
