"""Dense numpy tensors with tape-free reverse-mode differentiation.

Every op returns a :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them. ``Tensor.backward`` walks the
graph in reverse topological order. Only what the models in this package
need is implemented.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "abs_",
    "bce_with_logits",
    "concat",
    "default_dtype",
    "grad_enabled",
    "layer_norm",
    "linear",
    "matmul",
    "no_grad",
    "precision",
    "relu",
    "sigmoid",
    "silu",
    "softmax",
    "square",
    "take",
]

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf or an optimizer meets a bad gradient."""


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad = True


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return constant tensors."""
    old = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def grad_enabled():
    return _state.grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check(out, op):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        if isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
            # numpy scalars from full reductions keep their precision too
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=_state.dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def __len__(self):
        return len(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return sum_(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return _make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )


def _lift(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _state.dtype))


def _make(data, parents, backward, op):
    _check(data, op)
    if _state.grad and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data)


# elementwise ---------------------------------------------------------------


def add(a, b):
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b):
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs_(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x):
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(v):
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * v) + 0.5


def sigmoid(x):
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x):
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),), "silu")


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {kind!r}")


# reductions and shape ------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x, index):
    basic = _is_basic(index)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "getitem")


def take(x, idx):
    """Gather rows of ``x`` (first axis) with an integer array of any shape."""
    idx = np.asarray(idx)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _make(x.data[idx], (x,), backward, "take")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# linear algebra ------------------------------------------------------------


def matmul(a, b):
    a = _lift(a)
    b = _lift(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward, "linear")


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gain, bias), backward, "layer_norm")


def softmax(x, mask=None):
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks allowed entries."""
    v = x.data
    if mask is not None:
        v = np.where(mask, v, np.asarray(-1e9, dtype=v.dtype))
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy, stable for large |logit|."""
    z = logits.data
    labels = np.asarray(labels, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    return _make(loss, (logits,), lambda g: (g * (_sigmoid(z) - labels),), "bce")
