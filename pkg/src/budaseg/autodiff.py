"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: it provides exactly the operations a
dual-head encoder-decoder segmentation network and its losses need, each
with a hand-written backward rule. Graphs are recorded dynamically; calling
:meth:`Tensor.backward` replays them in reverse topological order and
accumulates gradients additively, so repeated calls without a reset double
the gradients.

Arrays default to float32. Tests may build float64 graphs (same code paths,
wider accumulators) by passing ``dtype`` explicitly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional float array with an optional gradient.

    ``data`` is a row-major numpy array; ``grad`` matches its shape once
    backward has run. Non-leaf tensors remember their parents and a closure
    that maps the output gradient onto parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'}{flag})"

    # -- operator sugar -------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be scalar. Gradients accumulate: calling backward a
        second time adds the same contributions again.
        """
        if self.data.size != 1:
            raise GradientError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in topo:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = acc + pg


def _toposort(root):
    """Reverse topological order, iterative to tolerate deep graphs."""
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
    order.reverse()
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward, "mul")


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward, "neg")


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.data.ndim for i in ax)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def scalar_mean(tensors):
    """Mean of scalar tensors, accumulated exactly in float64.

    Used to average per-sample losses: for identical inputs the result is
    bit-identical to a single term, for any count.
    """
    if not tensors:
        raise GradientError("scalar_mean requires at least one tensor")
    for t in tensors:
        if t.data.size != 1:
            raise ShapeError(
                f"scalar_mean expects scalars, got shape {t.data.shape}"
            )
    k = len(tensors)
    dtype = tensors[0].data.dtype
    value = math.fsum(float(t.data) for t in tensors) / k
    out = np.asarray(value, dtype=dtype)

    def backward(g):
        share = (g / k).astype(dtype, copy=False)
        return tuple(share.reshape(t.data.shape) for t in tensors)

    return _node(out, tuple(tensors), backward, "scalar_mean")


# -- activations ------------------------------------------------------------


def relu(a):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return _node(out, (a,), backward, "relu")


def softplus(a):
    """Elementwise log(1 + exp(x)), linear above x = 20 to avoid overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 20, x, np.log1p(np.exp(np.minimum(x, 20))))
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        # sigmoid, computed without overflow on either tail
        pos = x >= 0
        s = np.empty_like(x)
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _node(out, (a,), backward, "softplus")


# -- softmax family ----------------------------------------------------------


def softmax_channels(logits):
    """Per-pixel softmax over the class axis (axis 1), max-subtracted."""
    t = _as_tensor(logits)
    if t.data.ndim < 2 or t.data.shape[1] < 2:
        raise ShapeError(
            f"softmax_channels needs a class axis of size >= 2, got shape {t.data.shape}",
            dimension=1,
        )
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (t,), backward, "softmax_channels")


def log_softmax_channels(logits):
    """Log of the channel softmax, shares the stable max-subtract path."""
    t = _as_tensor(logits)
    if t.data.ndim < 2 or t.data.shape[1] < 2:
        raise ShapeError(
            f"log_softmax_channels needs a class axis of size >= 2, got shape {t.data.shape}",
            dimension=1,
        )
    z = t.data - t.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _node(out, (t,), backward, "log_softmax_channels")


# -- structural ops ----------------------------------------------------------


def concat_channels(tensors):
    """Concatenate along the channel axis (axis 1)."""
    ts = [_as_tensor(t) for t in tensors]
    base = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels got incompatible shapes {base} and {s}"
            )
    out = np.concatenate([t.data for t in ts], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _node(out, tuple(ts), backward, "concat_channels")


def dropout(a, rate, rng):
    """Inverted dropout with an explicit generator; rate in [0, 1)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = a.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep * scale
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return _node(out, (a,), backward, "dropout")


# -- spatial ops ---------------------------------------------------------------


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D cross-correlation over NCHW input via im2col and one GEMM.

    ``weight`` is (Cout, Cin, kh, kw) with odd kernel sides; output spatial
    size is (H + 2*padding - kh)//stride + 1. Gradients are defined for the
    input, the weight, and the bias.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    bias = _as_tensor(bias, x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got shape {weight.data.shape}")
    n, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if wcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}",
            dimension=1,
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d bias must have shape ({cout},), got {bias.data.shape}",
            dimension=0,
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
            dimension=2,
        )

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, Cin*kh*kw); the reshape materialises the patch matrix
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wflat = weight.data.reshape(cout, cin * kh * kw)
    out = col @ wflat.T
    out += bias.data
    y = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gb = g2.sum(axis=0)
        gw = (g2.T @ col).reshape(cout, cin, kh, kw)
        gcol = g2 @ wflat
        gcol = gcol.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :, :, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride,
                ] += gcol[:, :, :, :, i, j]
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        else:
            gx = gxp
        return gx, gw, gb

    return _node(y, (x, weight, bias), backward, "conv2d")


def maxpool2d(x, k):
    """k-by-k max pooling; the gradient flows only to each block argmax
    (first index on ties)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % k != 0:
        raise ShapeError(
            f"maxpool2d needs height divisible by {k}, got {h}", dimension=2
        )
    if w % k != 0:
        raise ShapeError(
            f"maxpool2d needs width divisible by {k}, got {w}", dimension=3
        )
    ho, wo = h // k, w // k
    blocks = (
        x.data.reshape(n, c, ho, k, wo, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, k * k)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(n, c, ho, wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def upsample_nearest(x, k):
    """Repeat each pixel k-by-k; the gradient sums back over each block."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(k, axis=2).repeat(k, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return _node(out, (x,), backward, "upsample_nearest")
