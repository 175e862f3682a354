"""Dense tensors with reverse-mode automatic differentiation.

Storage is numpy, float32 by default. Reductions (sums, means, the loss)
accumulate in float64 and cast back to the storage dtype. Every op records a
closure mapping the output gradient to the gradients of its parents; calling
``backward`` on a scalar walks the graph in reverse topological order.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GraphStateError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A node in a dynamically built computation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if self._backward is None:
            raise GraphStateError(
                "backward() called on a tensor that was not produced by a forward "
                "computation with differentiable inputs"
            )
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    b = _lift(b, a)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    b = _lift(b, a)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def tabs(a):
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a):
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp(a, lo, hi):
    # inclusive bounds: a value sitting exactly on a bound still passes gradient
    out = np.clip(a.data, lo, hi)
    keep = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * keep,))


def relu(a):
    out = np.maximum(a.data, 0)
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0),))


def elu(a, alpha=1.0):
    neg_part = alpha * np.expm1(np.minimum(a.data, 0))
    out = np.where(a.data > 0, a.data, neg_part).astype(a.dtype)
    slope = np.where(a.data > 0, 1.0, neg_part + alpha).astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * slope,))


def l2_norm(a):
    n = np.sqrt(np.sum(np.square(a.data, dtype=np.float64)))
    out = np.asarray(n, dtype=a.dtype)

    def back(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return ((g * a.data / n).astype(a.dtype),)

    return Tensor._from_op(out, (a,), back)


# ----------------------------------------------------------------- structural

def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return Tensor._from_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------- nn kernels

def linear(x, w, b=None):
    """``x @ w.T + b`` with ``w`` laid out as (out_features, in_features)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense expects (N, {w.shape[1]}) input, got {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def back(g):
        grads = [g @ w.data if x.requires_grad else None,
                 g.T @ x.data if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, back)


def _im2col(xp, kh, kw):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    h, w = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw), h, w


def conv2d(x, w, b=None, padding=1):
    """Stride-1 cross-correlation. ``w`` is (out_ch, in_ch, kh, kw)."""
    if x.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d expects (N, {w.shape[1]}, H, W) input, got {x.shape}")
    n = x.shape[0]
    o, c, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, h, wd = _im2col(xp, kh, kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, wd, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, back)


def maxpool2x2(x):
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2x2 needs (N, C, even H, even W), got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._from_op(out, (x,), back)


def batchnorm2d_train(x, gamma, beta, eps=1e-5):
    """Batch-statistics normalisation. Returns (output, batch_mean, batch_var)."""
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1))
    out = (xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)).astype(x.dtype)

    def back(g):
        gd = g.astype(np.float64)
        dgamma = (gd * xhat).sum(axis=(0, 2, 3))
        dbeta = gd.sum(axis=(0, 2, 3))
        dxhat = gd * gamma.data.reshape(1, c, 1, 1)
        dx = (inv_std.reshape(1, c, 1, 1) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return dx.astype(x.dtype), dgamma.astype(x.dtype), dbeta.astype(x.dtype)

    return Tensor._from_op(out, (x, gamma, beta), back), mu, var


def batchnorm2d_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    c = x.shape[1]
    inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
    scale = mul(gamma, inv_std)
    shift = sub(beta, mul(scale, running_mean.astype(x.dtype)))
    return add(mul(x, reshape(scale, (1, c, 1, 1))), reshape(shift, (1, c, 1, 1)))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy.

    ``logits`` is (N, c) with integer ``labels`` of length N, or (c,) with a
    single integer label (returns that sample's loss).
    """
    single = logits.data.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, c) logits, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n, c = z.shape
    if y.shape != (n,):
        raise DimensionError(f"{n} logit rows but {y.size} labels")
    if np.any(y >= c) or np.any(y < 0):
        raise IndexError(f"label out of range for {c} classes: {y[(y >= c) | (y < 0)][0]}")
    zd = z.astype(np.float64)
    zmax = zd.max(axis=1, keepdims=True)
    shifted = zd - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    per = lse - shifted[np.arange(n), y]
    loss = np.asarray(per.mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), y] -= 1.0
        grad = (p * (float(np.reshape(g, -1)[0]) / n)).astype(logits.dtype)
        return (grad.reshape(logits.shape),)

    return Tensor._from_op(loss, (logits,), back)


def dropout(x, p, rng):
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# ------------------------------------------------------------------ ParamSet

class ParamSet:
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in entries:
            self.add(name, t)

    def add(self, name, tensor):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    @property
    def total_dim(self):
        return sum(t.size for t in self._entries.values())

    def flat(self):
        return np.concatenate([t.data.reshape(-1) for t in self._entries.values()]) if self._entries else np.zeros(0)

    def flat_grad(self):
        parts = []
        for t in self._entries.values():
            parts.append(np.zeros(t.size, t.dtype) if t.grad is None else t.grad.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def assign_flat(self, values):
        values = np.asarray(values)
        if values.size != self.total_dim:
            raise DimensionError(f"flat vector has {values.size} entries, expected {self.total_dim}")
        off = 0
        for t in self._entries.values():
            t.data = values[off:off + t.size].reshape(t.shape).astype(t.dtype)
            off += t.size

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def requires_grad_(self, flag=True):
        for t in self._entries.values():
            t.requires_grad = flag
        return self

    def copy(self):
        return ParamSet((n, Tensor(t.data.copy(), dtype=t.dtype)) for n, t in self._entries.items())

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()
