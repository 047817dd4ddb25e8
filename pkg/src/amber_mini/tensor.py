"""Dense tensors with reverse-mode differentiation.

Small tape-based autograd on top of numpy, just enough for a miniature
transformer encoder and its alignment losses.  Tensors are immutable once
created; every differentiable operation records its parents and a backward
closure, and ``Tensor.backward()`` walks the implicit tape in reverse
topological order.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "MaskError",
    "no_grad",
    "matmul",
    "masked_softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "gelu",
    "stack",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MaskError(ValueError):
    """Raised when an attention mask leaves a query with no allowed key."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-d array with an attached tape node.

    `data` is a read-only numpy array; `grad` is filled in by `backward()`
    for tensors with `requires_grad` set (directly or via a parent).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Sequence["Tensor"] = (),
                 _backward_fn: Optional[Callable] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents) if _grad_enabled else ()
        self._backward_fn = _backward_fn if _grad_enabled else None
        self.requires_grad = (requires_grad or any(p.requires_grad for p in self._parents)) \
            and _grad_enabled
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, " \
               f"requires_grad={self.requires_grad})"

    # -- graph construction helpers ------------------------------------------

    @staticmethod
    def _lift(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def _make(self, data, parents, backward_fn) -> "Tensor":
        return Tensor(data, _parents=parents, _backward_fn=backward_fn)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other, self.dtype)
        out_data = self.data + other.data

        def backward(g, a=self, b=other):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other, self.dtype)
        out_data = self.data - other.data

        def backward(g, a=self, b=other):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

        return self._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return self._lift(other, self.dtype) - self

    def __mul__(self, other):
        other = self._lift(other, self.dtype)
        out_data = self.data * other.data

        def backward(g, a=self, b=other):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other, self.dtype)
        out_data = self.data / other.data

        def backward(g, a=self, b=other):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._lift(other, self.dtype) / self

    def __pow__(self, p: float):
        out_data = self.data ** p

        def backward(g, a=self, p=p):
            return (g * p * a.data ** (p - 1.0),)

        return self._make(out_data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(g, a=self):
            return (g.reshape(a.shape),)

        return self._make(out_data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def backward(g, inv=tuple(inv)):
            return (g.transpose(inv),)

        return self._make(self.data.transpose(axes), (self,), backward)

    def swapaxes(self, a: int, b: int):
        def backward(g, a=a, b=b):
            return (g.swapaxes(a, b),)

        return self._make(self.data.swapaxes(a, b), (self,), backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g, a=self, idx=idx):
            gx = np.zeros(a.shape, dtype=a.dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return self._make(out_data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities ------------------------------------------------------

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g, y=out_data):
            return (g * (1.0 - y * y),)

        return self._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, y=out_data):
            return (g * y,)

        return self._make(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g, a=self):
            return (g / a.data,)

        return self._make(out_data, (self,), backward)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss; fills `grad` on the tape."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already called on this loss; "
                               "build a fresh graph before differentiating again")
        self._backward_done = True
        order = _toposort(self)

        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if parent._parents or parent._backward_fn is not None:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
                else:
                    parent.grad = pg if parent.grad is None else parent.grad + pg


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


# -- free-function operations ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with the usual batched-numpy semantics."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g, a=a, b=b):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward)


def masked_softmax(logits: Tensor, allow: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the allowed positions only; disallowed entries are exact 0.

    `allow` is a boolean array broadcastable to `logits.shape`.  Stability via
    max-subtraction over the allowed entries.  A slice with no allowed
    position raises MaskError.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), logits.shape)
    if not allow.any(axis=axis).all():
        raise MaskError("masked_softmax: a position has no allowed entries")
    neg = np.finfo(logits.dtype).min
    masked = np.where(allow, logits.data, neg)
    m = masked.max(axis=axis, keepdims=True)
    e = np.exp(masked - m)
    e = np.where(allow, e, 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g, p=p, axis=axis):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return Tensor(p, _parents=(logits,), _backward_fn=backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    m = logits.data.max(axis=axis, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g, out=out_data, axis=axis):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor(out_data, _parents=(logits,), _backward_fn=backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single position, via log-sum-exp."""
    v = logits.shape[-1]
    if not 0 <= target < v:
        raise IndexError(f"cross_entropy: target {target} out of range [0, {v})")
    return -log_softmax(logits)[target]


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi

    def backward(g, xd=x.data, phi=phi):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g, axis=axis, n=len(tensors)):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor(out_data, _parents=tuple(tensors), _backward_fn=backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, axis=axis, splits=splits):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward_fn=backward)
