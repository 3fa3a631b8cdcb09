"""Dense float64 tensors with reverse-mode differentiation.

Each op that touches a ``requires_grad`` input records a node carrying a
monotone construction id, its inputs and a backward closure. ``backward``
walks the reachable nodes in decreasing id order, which is a valid reverse
topological order because a node's inputs always exist before the node.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_state = threading.local()
_ids = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("id", "inputs", "backward")

    def __init__(self, inputs, backward):
        self.id = next(_ids)
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d values to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t._node is not None:
            stack.extend(t._node.inputs)
    order = sorted((t for t in seen.values() if t._node is not None),
                   key=lambda t: t._node.id, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
    for key, g in grads.items():
        leaf = seen[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


# -- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), bw)


# -- fused ops -------------------------------------------------------------

def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis with disallowed entries pinned to exactly 0.

    ``mask`` is boolean and broadcastable to ``scores``; True marks allowed.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, scores.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {scores.shape}") from None
    t = scores.shape[-1]
    m2 = np.ascontiguousarray(full).reshape(-1, t)
    if not m2.any(axis=1).all():
        raise ContractError("masked_softmax: a row has no allowed entry")
    s2 = scores.data.reshape(-1, t)
    p2 = K.masked_softmax_fwd(s2, m2)
    probs = p2.reshape(scores.shape)

    def bw(g):
        return (K.masked_softmax_bwd(p2, np.ascontiguousarray(g).reshape(-1, t)).reshape(scores.shape),)
    return _make(probs, (scores,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    y, xhat, rstd = K.layernorm_fwd(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = K.layernorm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dg, db
    return _make(y.reshape(x.shape), (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    return _make(K.gelu_fwd(x.data), (x,),
                 lambda g: (K.gelu_bwd(x.data, np.ascontiguousarray(g)),))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``ids.shape + (cols,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"take_rows: index out of range for {table.shape[0]} rows")
    flat = ids.reshape(-1)

    def bw(g):
        out = np.zeros_like(table.data)
        K.scatter_add_rows(out, flat, np.ascontiguousarray(g).reshape(flat.size, -1))
        return (out,)
    return _make(table.data[ids], (table,), bw)


embedding = take_rows


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of ``logits`` (N x C) against integer ``targets`` (N,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    n, c = logits.shape
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ContractError(f"cross_entropy: target out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, targets]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)
    return _make(np.array(loss), (logits,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))
