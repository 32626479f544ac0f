"""Differentiable primitives over `Tensor`.

Each function computes its forward value with numpy and registers a closure
mapping the output gradient to one gradient per parent.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth and zero at the origin."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return Tensor._make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


# reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(a.data[idx]), (a,), backward, "getitem")


def take_rows(a, index) -> Tensor:
    """Gather rows of a 2-D tensor: out[...] = a[index[...], :]."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n, c = a.shape

    def backward(g):
        flat_idx = index.reshape(-1)
        flat_g = g.reshape(-1, c)
        out = np.zeros((n, c))
        # bincount per column is far faster than np.add.at for large gathers
        for k in range(c):
            out[:, k] = np.bincount(flat_idx, weights=flat_g[:, k], minlength=n)
        return (out,)

    return Tensor._make(a.data[index], (a,), backward, "take_rows")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


# softmax family ------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward, "log_softmax")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (a,), backward, "l2_normalize")


def bce_with_logits(logits, target, weight=None) -> Tensor:
    """Mean binary cross-entropy computed from logits, stable for large |x|."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(target, dtype=np.float64)
    w = np.ones_like(x) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), x.shape)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray((w * loss).sum() / n)

    def backward(g):
        return (g * w * (_sigmoid(x) - t) / n,)

    return Tensor._make(out, (logits,), backward, "bce_with_logits")


def attention(q, k, v, return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    q: (..., n, d), k: (..., m, d), v: (..., m, dv). Each output row is a convex
    combination of the rows of v.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("attention: keys and values disagree on token count")
    if k.shape[-2] < 1:
        raise ValueError("attention needs at least one key")
    d = q.shape[-1]
    logits = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / np.sqrt(d))
    w = softmax(logits, axis=-1)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# spatial -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of a (C, H, W) map with a (O, C/groups, k, k) kernel.

    groups == C == O gives a depthwise convolution.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel spatial dims must be odd")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if C % groups or O % groups or Cg != C // groups:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {weight.shape}, groups {groups}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError("conv2d kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    G, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))).reshape(G, Cg, Hp, Wp)
    # im2col: (G, Cg*kh*kw, Ho*Wo), then one batched matmul per group
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(G, Cg * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(G, Og, Cg * kh * kw)
    out = np.matmul(wmat, cols).reshape(O, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def backward(g):
        gg = g.reshape(G, Og, Ho * Wo)
        gw = np.matmul(gg, cols.transpose(0, 2, 1))
        gcols = np.matmul(wmat.transpose(0, 2, 1), gg).reshape(G, Cg, kh, kw, Ho, Wo)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + he:stride, j:j + we:stride] += gcols[:, :, i, j]
        gx = gx.reshape(C, Hp, Wp)[:, padding:padding + H, padding:padding + W]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "conv2d")


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of a (C, H, W) map by an integer factor."""
    x = as_tensor(x)
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)),)

    return Tensor._make(out, (x,), backward, "upsample_nearest")


def avg_pool(x, factor: int) -> Tensor:
    x = as_tensor(x)
    C, H, W = x.shape
    if H % factor or W % factor:
        raise ValueError("avg_pool needs dims divisible by the factor")
    out = x.data.reshape(C, H // factor, factor, W // factor, factor).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor),)

    return Tensor._make(out, (x,), backward, "avg_pool")
