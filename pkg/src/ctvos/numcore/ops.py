"""Differentiable primitives.

Every function takes and returns :class:`Tensor`; scalars and arrays are
accepted where a constant operand makes sense. Backward closures return one
gradient per input, in input order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor, get_dtype, record


class DimensionError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0))
    return record(out, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(Tensor(y), (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return record(Tensor(y), (x,), lambda g: (g * y * (1 - y),))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return record(Tensor(np.abs(x.data)), (x,), lambda g: (g * s,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return record(Tensor(np.log(x.data)), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi))
    return record(out, (x,), lambda g: (g * inside,))


def huber(d: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual: quadratic below ``delta``."""
    a = np.abs(d.data)
    small = a < delta
    y = np.where(small, 0.5 * d.data * d.data, delta * (a - 0.5 * delta))
    slope = np.where(small, d.data, delta * np.sign(d.data))
    return record(Tensor(y), (d,), lambda g: (g * slope,))


# -- reductions -------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return record(out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record(out, (x,), bw)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; gradient scatters back with accumulation."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data.reshape(-1)[idx])

    def bw(g):
        full = np.zeros(x.size, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full.reshape(x.shape),)

    return record(out, (x,), bw)


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    y = np.moveaxis(_kernels.softmax_lastaxis(moved), -1, axis)
    y = np.ascontiguousarray(y)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record(Tensor(y), (x,), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,kH,kW]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(o, -1)
    out = Tensor(np.matmul(w2, cols).reshape(n, o, oh, ow))

    def bw(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if not x.requires_grad:
            return (None, gw)
        gcols = np.matmul(w2.T, g2)
        gxp = _kernels.col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (np.ascontiguousarray(gx), gw)

    return record(out, (x, w), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(Tensor(y), (x,), bw)


def bilinear_matrix(n_in: int, coords: np.ndarray, dtype=None) -> np.ndarray:
    """Row-stochastic interpolation matrix sampling ``n_in`` samples at ``coords``.

    Coordinates are clamped to ``[0, n_in - 1]``; integer coordinates give
    exact one-hot rows.
    """
    dtype = dtype or get_dtype()
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0, n_in - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    m = np.zeros((len(coords), n_in), dtype=np.float64)
    rows = np.arange(len(coords))
    m[rows, lo] += 1 - frac
    m[rows, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resize of the last two axes of ``x[N,C,H,W]``."""
    n, c, h, w = x.shape

    def coords(n_in, n_out):
        if align_corners:
            return np.linspace(0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5

    ry = bilinear_matrix(h, coords(h, out_h), x.data.dtype)
    rx = bilinear_matrix(w, coords(w, out_w), x.data.dtype)
    y = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return record(Tensor(y), (x,), bw)
