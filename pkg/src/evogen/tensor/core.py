"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a new immutable :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the result remembers its parents and a
vector-Jacobian product closure; :func:`grad` sweeps that DAG in reverse
topological order and sums adjoints over shared subexpressions.

Shape rules follow numpy broadcasting for elementwise ops and ``np.matmul`` for
:func:`matmul` (both operands at least 2-D, leading dims broadcast).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference paths)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def negative(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (0.5 * g / out,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast, both operands >= 2-D."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


# -- elementwise unary ------------------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return _node(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes only where the input is inside."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    return _node(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                            unbroadcast(np.where(cond, 0.0, g), b.shape)))


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no adjoint flows back."""
    return Tensor(x.data)


# -- reductions and normalizations -----------------------------------------
def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(_norm_axis(a, ndim) for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _node(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), vjp)


def layer_norm(x: Tensor, scale: Tensor | None = None, offset: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis; optional learnable scale/offset broadcast against the result."""
    axis = _norm_axis(axis, x.ndim)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if scale is not None:
        out = out * scale.data
        parents.append(scale)
    if offset is not None:
        out = out + offset.data
        parents.append(offset)

    def vjp(g):
        gx_hat = g * scale.data if scale is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if scale is not None:
            grads.append(unbroadcast(g * xhat, scale.shape))
        if offset is not None:
            grads.append(unbroadcast(g, offset.shape))
        return tuple(grads)

    return _node(out, parents, vjp)


# -- shape manipulation -----------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, perm=None) -> Tensor:
    if perm is None:
        perm = tuple(reversed(range(x.ndim)))
    perm = tuple(_norm_axis(p, x.ndim) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {perm} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(perm))
    return _node(np.transpose(x.data, perm), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    perm = list(range(x.ndim))
    a, b = _norm_axis(a, x.ndim), _norm_axis(b, x.ndim)
    perm[a], perm[b] = perm[b], perm[a]
    return transpose(x, perm)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, x.shape),))


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in items)


def slice_(x: Tensor, key) -> Tensor:
    """Numpy indexing (basic or advanced); repeated advanced indices accumulate adjoints."""
    basic = _is_basic_index(key)

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(x.data[key], (x,), vjp)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis``; output shape is x.shape[:axis] + indices.shape + x.shape[axis+1:]."""
    axis = _norm_axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise IndexError("gather index out of range")

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(np.moveaxis(full, axis, 0), idx, gm)
        return (full,)

    return _node(np.take(x.data, idx, axis=axis), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"shape mismatch in concat: {tensors[0].shape} vs {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = _norm_axis(axis, out.ndim)
    return _node(out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def one_hot(indices, depth: int, dtype=np.float64) -> Tensor:
    """Constant one-hot encoding along a new trailing axis."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1, axis=-1)
    return Tensor(out)


# -- backward sweep ---------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, leaves: Iterable[Tensor], allow_unused: bool = False) -> list[np.ndarray]:
    """Adjoints of a scalar ``loss`` with respect to each leaf.

    Raises if ``loss`` is not a scalar, or if a leaf does not feed the loss
    (unless ``allow_unused``, in which case its adjoint is zeros).
    """
    leaves = list(leaves)
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        adj[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            g = adj.get(id(node))
            if g is None or node._vjp is None:
                continue
            for p, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + gp
                else:
                    adj[key] = np.array(gp, dtype=p.dtype, copy=True)
            if node._parents:
                # Interior adjoints are not needed after propagation.
                del adj[id(node)]
    out = []
    for leaf in leaves:
        g = adj.get(id(leaf))
        if g is None:
            if id(leaf) == id(loss):
                g = np.ones_like(loss.data)
            elif not allow_unused:
                raise ValueError(f"leaf {leaf.name or leaf!r} is not part of the loss graph")
            else:
                g = np.zeros_like(leaf.data)
        out.append(g)
    return out
