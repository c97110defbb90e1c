"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Operations on tensors that require
gradients record their inputs and a closure mapping the output gradient to
input gradients; :meth:`Tensor.backward` walks that graph once in reverse
topological order.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them is a scalar, or one shape is a trailing suffix of the
other (a bias over leading batch axes). Everything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels

_FLOATS = (np.float32, np.float64)
_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def check_finite(enabled=True):
    """Raise :class:`NonFiniteError` whenever an op output is non-finite."""
    global _check_finite
    prev, _check_finite = _check_finite, enabled
    try:
        yield
    finally:
        _check_finite = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node._backward_fn is not None:
                node._parents = ()
                node._backward_fn = None
                node._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return transpose(self, (1, 0))


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


# ---------------------------------------------------------------------------
# helpers


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn):
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _check_broadcast(a, b):
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"incompatible shapes {a} and {b} (only scalar and leading-batch broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def tanh(x):
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


def masked_fill(x, mask, value):
    """Set entries where ``mask`` (a constant boolean array, NumPy-broadcastable) is True."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def backward(g):
        return (np.where(mask, np.zeros((), dtype=g.dtype), g),)

    return _result(out, (x,), backward)


def scale_by_mask(x, mask):
    """Multiply by a constant 0/1 array (NumPy-broadcastable)."""
    m = np.asarray(mask, dtype=x.dtype)
    return _result(x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx):
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; raises IndexError for ids outside the table."""
    ids = np.asarray(ids)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(out, (weight,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        ad, bd = a.data, b.data
        out = ad @ bd

        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _result(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched matmul needs equal batch dims: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def _to_rows(arr, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])), moved.shape


def _from_rows(rows, moved_shape, axis):
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)


def softmax(x, axis=-1):
    rows, mshape = _to_rows(x.data, axis)
    y = kernels.softmax_forward(rows)

    def backward(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(kernels.softmax_backward(y, grows), mshape, axis),)

    return _result(_from_rows(y, mshape, axis), (x,), backward)


def log_softmax(x, axis=-1):
    rows, mshape = _to_rows(x.data, axis)
    y = kernels.log_softmax_forward(rows)

    def backward(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(kernels.log_softmax_backward(y, grows), mshape, axis),)

    return _result(_from_rows(y, mshape, axis), (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    gd = np.ascontiguousarray(gain.data, dtype=x.dtype)
    bd = np.ascontiguousarray(bias.data, dtype=x.dtype)
    y, xhat, rstd = kernels.layer_norm_forward(rows, gd, bd, eps)
    shape = x.shape

    def backward(g):
        dx, dg, db = kernels.layer_norm_backward(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _result(y.reshape(shape), (x, gain, bias), backward)


def cross_entropy_logits(logits, targets, ignore_id=-100):
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[n, V]``; positions whose target equals ``ignore_id`` are
    skipped. With nothing left to average the loss is 0 with zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_logits expects [n, V] logits")
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows of logits")
    keep = targets != ignore_id
    bad = keep & ((targets < 0) | (targets >= v))
    if bad.any():
        raise IndexError(f"target id {int(targets[bad][0])} outside vocabulary of size {v}")
    count = int(keep.sum())
    dtype = logits.dtype
    if count == 0:
        return _result(np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros((n, v), dtype=dtype),))
    lp = kernels.log_softmax_forward(np.ascontiguousarray(logits.data))
    rows = np.nonzero(keep)[0]
    cols = targets[keep]
    loss = -lp[rows, cols].sum() / count

    def backward(g):
        grad = np.exp(lp)
        grad[~keep] = 0
        grad[rows, cols] -= 1
        return (grad * (g / count),)

    return _result(np.asarray(loss, dtype=dtype), (logits,), backward)
