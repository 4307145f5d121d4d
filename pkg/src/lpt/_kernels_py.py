"""Pure-numpy kernels mirroring ``lpt._kernels``.

``matmul`` and ``sum_rows`` accumulate in the same index order as the
compiled versions, so both backends agree bit-for-bit on them. The 3x3
kernels agree to rounding.
"""

import numpy as np


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError("matmul: inner dimensions differ")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p]
    return out


def sum_rows(x):
    if x.shape[0] == 0:
        return np.zeros(x.shape[1], dtype=x.dtype)
    return np.cumsum(x, axis=0)[-1].copy()


def _shifts(h, w):
    for kh in range(3):
        for kw in range(3):
            dy, dx = kh - 1, kw - 1
            # destination rows/cols for which the source pixel (i+dy, j+dx) exists
            yield kh, kw, slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)), \
                slice(max(0, dy), h + min(0, dy)), slice(max(0, dx), w + min(0, dx))


def conv3x3(x, w):
    n, _, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd), dtype=x.dtype)
    for kh, kw, di, dj, si, sj in _shifts(h, wd):
        out[:, :, di, dj] += np.einsum("nchw,oc->nohw", x[:, :, si, sj], w[:, :, kh, kw])
    return out


def conv3x3_grad_input(g, w):
    n, _, h, wd = g.shape
    out = np.zeros((n, w.shape[1], h, wd), dtype=g.dtype)
    for kh, kw, di, dj, si, sj in _shifts(h, wd):
        out[:, :, si, sj] += np.einsum("nohw,oc->nchw", g[:, :, di, dj], w[:, :, kh, kw])
    return out


def conv3x3_grad_weight(x, g):
    _, c, h, wd = x.shape
    out = np.zeros((g.shape[1], c, 3, 3), dtype=x.dtype)
    for kh, kw, di, dj, si, sj in _shifts(h, wd):
        out[:, :, kh, kw] = np.einsum("nohw,nchw->oc", g[:, :, di, dj], x[:, :, si, sj])
    return out


def _pool_counts(h, w, dtype):
    rows = np.array([min(i + 2, h) - max(i - 1, 0) for i in range(h)], dtype=dtype)
    cols = np.array([min(j + 2, w) - max(j - 1, 0) for j in range(w)], dtype=dtype)
    return np.outer(rows, cols)


def avgpool3x3(x):
    h, w = x.shape[2:]
    acc = np.zeros_like(x)
    for _, _, di, dj, si, sj in _shifts(h, w):
        acc[:, :, di, dj] += x[:, :, si, sj]
    return acc / _pool_counts(h, w, x.dtype)


def avgpool3x3_grad(g):
    h, w = g.shape[2:]
    share = g / _pool_counts(h, w, g.dtype)
    out = np.zeros_like(g)
    for _, _, di, dj, si, sj in _shifts(h, w):
        out[:, :, si, sj] += share[:, :, di, dj]
    return out
