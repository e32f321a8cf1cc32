"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every tensor produced by a differentiable op records its parents and a
backward closure.  Node ids come from a global monotone counter, so sorting
the reachable nodes by id in descending order reproduces the exact reverse
of insertion order without keeping a global tape alive between steps.

Gradients accumulate into ``.grad`` of leaves that require them; calling
``backward`` twice without :meth:`Tensor.zero_grad` adds the two results.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "dropout",
    "softmax_lastdim",
    "layer_norm",
    "backward",
]

_ids = itertools.count()
_grad_enabled = True
CHECK_FINITE = True


def _finite(arr: np.ndarray) -> bool:
    # any NaN/inf element makes the sum non-finite; one reduction is cheaper than isfinite().all()
    return bool(np.isfinite(arr.sum()))


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("tag", "parents", "backward_fn")

    def __init__(self, tag: str, parents: tuple, backward_fn: Callable):
        self.tag = tag
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float64 array plus optional gradient buffer.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` of identical shape.  Interior nodes never store gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "id", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _node: Optional[_Node] = None):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not _finite(arr):
            where = _node.tag if _node is not None else "leaf construction"
            raise NumericError(f"non-finite value produced by {where}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self._node = _node
        self.grad = np.zeros_like(arr) if (self.requires_grad and _node is None) else None

    # -- introspection -------------------------------------------------
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
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("division is only defined by a scalar constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else _axis_count(self.shape, axis)
        return scale(_sum(self, axis, keepdims), 1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, ax1: int = -2, ax2: int = -1) -> "Tensor":
        return _swapaxes(self, ax1, ax2)

    def abs(self) -> "Tensor":
        return _abs(self)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_count(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


def _make(data: np.ndarray, parents: Sequence[Tensor], tag: str, backward_fn: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _node=_Node(tag, tuple(parents), backward_fn))
    if CHECK_FINITE and not _finite(data):
        raise NumericError(f"non-finite value produced by {tag}")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.id = next(_ids)
    out._node = None
    out.grad = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, tag: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), "relu", lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _make(out, (a,), "gelu", bw)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


def _abs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * sgn,))


# -- reductions and views ------------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), "sum", bw)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


def _swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), "transpose",
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def _getitem(a: Tensor, key) -> Tensor:
    parts = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (slice, int)) or k is Ellipsis for k in parts):
        raise ContractError("only basic slicing is differentiable")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make(a.data[key], (a,), "getitem", bw)


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    if ad.ndim > 2:
        # stacked products fall off the BLAS path for strided views
        ad = np.ascontiguousarray(ad)
        if bd.ndim > 2:
            bd = np.ascontiguousarray(bd)

    def bw(g):
        bt = np.swapaxes(bd, -1, -2)
        ga = g @ (np.ascontiguousarray(bt) if bd.ndim > 2 else bt)
        if bd.ndim == 2:
            # weight matrix shared over every leading index: fold batch into rows
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.ascontiguousarray(np.swapaxes(ad, -1, -2)) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), "matmul", bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last axis")
    if not _finite(x.data):
        raise NumericError("softmax input contains non-finite values")
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = g - np.einsum("...i,...i->...", g, s)[..., None]
        gx *= s
        return (gx,)

    return _make(s, (x,), "softmax", bw)


def masked_softmax_lastdim(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax weights zeroed where ``mask == 0`` and renormalised over the kept entries.

    Equal to ``softmax(x) * mask / sum(softmax(x) * mask)``; the shift uses the
    maximum over kept entries so masked logits never cause underflow.  Every
    row needs at least one kept entry.
    """
    keep = np.broadcast_to(np.asarray(mask) > 0, x.shape)
    if not keep.any(axis=-1).all():
        raise ContractError("every softmax row needs at least one unmasked entry")
    if not _finite(x.data):
        raise NumericError("softmax input contains non-finite values")
    shift = np.where(keep, x.data, -np.inf).max(axis=-1, keepdims=True)
    s = np.exp(np.minimum(x.data - shift, 0.0))
    s *= keep
    s /= s.sum(axis=-1, keepdims=True)

    def bw(g):
        gx = g - np.einsum("...i,...i->...", g, s)[..., None]
        gx *= s
        return (gx,)

    return _make(s, (x,), "masked_softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each last-axis slice (population variance), then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm width {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), "layer_norm", bw)


# -- reverse sweep -------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    reach: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in reach:
            continue
        reach[t.id] = t
        if t._node is not None:
            stack.extend(p for p in t._node.parents if p.requires_grad and p.id not in reach)

    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for tid in sorted(reach, reverse=True):
        g = grads.pop(tid, None)
        if g is None:
            continue
        t = reach[tid]
        if t._node is None:
            t.grad += g
            continue
        for p, pg in zip(t._node.parents, t._node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
