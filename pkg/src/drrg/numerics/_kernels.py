"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. Set ``DRRG_DISABLE_NUMBA=1`` to force the
numpy path (useful for debugging and for the kernel benchmark). Both paths
must agree to floating-point round-off; ``tests/test_kernels.py`` checks this.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("DRRG_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference implementations


def im2col_numpy(x, kh, kw, stride, pad):
    # x: (B, C, H, W) -> cols (B, C*kh*kw, oh*ow)
    b, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def col2im_numpy(cols, x_shape, kh, kw, stride, pad, oh, ow):
    b, c, h, w = x_shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def scatter_last_numpy(weights, ids, size):
    # weights (B, T, M), ids (B, M) -> out (B, T, size); out[b,t,ids[b,j]] += weights[b,t,j]
    b, t, m = weights.shape
    out = np.zeros((b, t, size))
    for bi in range(b):
        onehot = np.zeros((m, size))
        onehot[np.arange(m), ids[bi]] = 1.0
        out[bi] = weights[bi] @ onehot
    return out


def gather_last_numpy(values, ids):
    # values (B, T, V), ids (B, M) -> (B, T, M)
    return np.take_along_axis(values, np.broadcast_to(ids[:, None, :], values.shape[:2] + ids.shape[1:]), axis=2)


def lcs_length_numpy(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    a = np.asarray(a)
    b = np.asarray(b)
    prev = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        eq = a[i] == b
        cur = np.zeros(m + 1, dtype=np.int64)
        # cur[j+1] = prev[j]+1 if eq else max(prev[j+1], cur[j]); the max over cur needs a scan
        diag = np.where(eq, prev[:-1] + 1, 0)
        cand = np.maximum(prev[1:], diag)
        cur[1:] = np.maximum.accumulate(cand)
        prev = cur
    return int(prev[m])


def _bilinear_weights(n_in, n_out):
    # output pixel y samples source coordinate y * n_in / n_out: the centre of
    # feature cell j of a stride-s, pad-(k//2) conv stack sits at input pixel s*j
    src = np.arange(n_out) * n_in / n_out
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def bilinear_upsample_numpy(img, out_h, out_w):
    ry = _bilinear_weights(img.shape[0], out_h)
    rx = _bilinear_weights(img.shape[1], out_w)
    return ry @ img @ rx.T


# --------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
        b, c, h, w = x.shape
        cols = np.zeros((b, c * kh * kw, oh * ow))
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for y in range(oh):
                            yy = y * stride + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for xq in range(ow):
                                xx = xq * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                cols[bi, row, y * ow + xq] = x[bi, ci, yy, xx]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, b, c, h, w, kh, kw, stride, pad, oh, ow):
        out = np.zeros((b, c, h, w))
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for y in range(oh):
                            yy = y * stride + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for xq in range(ow):
                                xx = xq * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                out[bi, ci, yy, xx] += cols[bi, row, y * ow + xq]
        return out

    @njit(cache=True)
    def _scatter_last_nb(weights, ids, size):
        b, t, m = weights.shape
        out = np.zeros((b, t, size))
        for bi in range(b):
            for ti in range(t):
                for j in range(m):
                    out[bi, ti, ids[bi, j]] += weights[bi, ti, j]
        return out

    @njit(cache=True)
    def _gather_last_nb(values, ids):
        b, t, _ = values.shape
        m = ids.shape[1]
        out = np.empty((b, t, m))
        for bi in range(b):
            for ti in range(t):
                for j in range(m):
                    out[bi, ti, j] = values[bi, ti, ids[bi, j]]
        return out

    @njit(cache=True)
    def _lcs_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[m]


# --------------------------------------------------------------------------
# dispatchers


def im2col(x, kh, kw, stride, pad):
    if not HAVE_NUMBA:
        return im2col_numpy(x, kh, kw, stride, pad)
    h, w = x.shape[2], x.shape[3]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow), oh, ow


def col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    if not HAVE_NUMBA:
        return col2im_numpy(cols, x_shape, kh, kw, stride, pad, oh, ow)
    b, c, h, w = x_shape
    return _col2im_nb(np.ascontiguousarray(cols), b, c, h, w, kh, kw, stride, pad, oh, ow)


def scatter_last(weights, ids, size):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if not HAVE_NUMBA:
        return scatter_last_numpy(weights, ids, size)
    return _scatter_last_nb(np.ascontiguousarray(weights), ids, size)


def gather_last(values, ids):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if not HAVE_NUMBA:
        return gather_last_numpy(values, ids)
    return _gather_last_nb(np.ascontiguousarray(values), ids)


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    if not HAVE_NUMBA:
        return lcs_length_numpy(a, b)
    return int(_lcs_nb(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


def bilinear_upsample(img, out_h, out_w):
    # separable form is two small matmuls; numba gains nothing here
    return bilinear_upsample_numpy(np.asarray(img, dtype=np.float64), out_h, out_w)
