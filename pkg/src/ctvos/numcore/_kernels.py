"""Hot loops behind conv2d and softmax.

Each kernel has a numba version and a pure-numpy version. The numba path is
used when numba imports and ``CTVOS_NUMBA`` is not ``0``; set
``CTVOS_NUMBA=0`` to force the numpy path. Softmax dispatches to numpy on
both paths because numpy's vectorized exp beats the numba row loop; the
numba softmax is kept for the benchmark and equivalence tests.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("CTVOS_NUMBA", "1") != "0"


# -- numpy reference paths ---------------------------------------------------

def im2col_numpy(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im_numpy(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int,
                 oh: int, ow: int) -> np.ndarray:
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    return out


def flush_floor(dtype) -> float:
    """Probabilities below this are set to zero.

    Sharp attention rows otherwise leave subnormal entries that slow every
    later matmul on x86 by an order of magnitude.
    """
    return float(np.finfo(dtype).tiny) * 2.0 ** 24


def softmax_lastaxis_numpy(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    out[out < flush_floor(out.dtype)] = 0
    return out


# -- numba paths ---------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, oh, ow):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c * kh * kw, oh * ow), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            sy = y * stride + i
                            for x in range(ow):
                                cols[b, row, y * ow + x] = xp[b, ch, sy, x * stride + j]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride, oh, ow):
        n, c = out.shape[0], out.shape[1]
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            sy = y * stride + i
                            for x in range(ow):
                                out[b, ch, sy, x * stride + j] += cols[b, row, y * ow + x]
        return out

    @njit(cache=True)
    def _softmax_rows_nb(x2d, floor):
        out = np.empty_like(x2d)
        for r in range(x2d.shape[0]):
            m = x2d[r, 0]
            for k in range(1, x2d.shape[1]):
                if x2d[r, k] > m:
                    m = x2d[r, k]
            s = 0.0
            for k in range(x2d.shape[1]):
                e = np.exp(x2d[r, k] - m)
                out[r, k] = e
                s += e
            for k in range(x2d.shape[1]):
                v = out[r, k] / s
                out[r, k] = v if v >= floor else 0.0
        return out


def im2col_numba(xp, kh, kw, stride, oh, ow):
    return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)


def col2im_numba(cols, padded_shape, kh, kw, stride, oh, ow):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, oh, ow)


def softmax_lastaxis_numba(x):
    x2d = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return _softmax_rows_nb(x2d, flush_floor(x2d.dtype)).reshape(x.shape)


if USE_NUMBA:
    im2col, col2im, softmax_lastaxis = im2col_numba, col2im_numba, softmax_lastaxis_numpy
else:
    im2col, col2im, softmax_lastaxis = im2col_numpy, col2im_numpy, softmax_lastaxis_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
