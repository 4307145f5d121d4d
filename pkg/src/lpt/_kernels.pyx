# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Every reduction runs sequentially in index order."""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline object _dtype(real dummy):
    if real is double:
        return np.float64
    return np.float32


def matmul(const real[:, ::1] a, const real[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef real aik
    if b.shape[0] != k:
        raise ValueError("matmul: inner dimensions differ")
    out_arr = np.zeros((n, m), dtype=_dtype(<real>0))
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        for p in range(k):
            aik = a[i, p]
            for j in range(m):
                out[i, j] = out[i, j] + aik * b[p, j]
    return out_arr


def sum_rows(const real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j
    out_arr = np.zeros(m, dtype=_dtype(<real>0))
    cdef real[::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[j] = out[j] + x[i, j]
    return out_arr


def conv3x3(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    cdef Py_ssize_t n, o, c, i, j, kh, kw, ii, jj
    cdef real acc
    out_arr = np.zeros((N, O, H, W), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = 0
                    for c in range(C):
                        for kh in range(3):
                            ii = i + kh - 1
                            if ii < 0 or ii >= H:
                                continue
                            for kw in range(3):
                                jj = j + kw - 1
                                if jj < 0 or jj >= W:
                                    continue
                                acc = acc + x[n, c, ii, jj] * w[o, c, kh, kw]
                    out[n, o, i, j] = acc
    return out_arr


def conv3x3_grad_input(const real[:, :, :, ::1] g, const real[:, :, :, ::1] w):
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t C = w.shape[1]
    cdef Py_ssize_t n, o, c, i, j, kh, kw, ii, jj
    cdef real gv
    out_arr = np.zeros((N, C, H, W), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    gv = g[n, o, i, j]
                    for c in range(C):
                        for kh in range(3):
                            ii = i + kh - 1
                            if ii < 0 or ii >= H:
                                continue
                            for kw in range(3):
                                jj = j + kw - 1
                                if jj < 0 or jj >= W:
                                    continue
                                out[n, c, ii, jj] = out[n, c, ii, jj] + gv * w[o, c, kh, kw]
    return out_arr


def conv3x3_grad_weight(const real[:, :, :, ::1] x, const real[:, :, :, ::1] g):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = g.shape[1]
    cdef Py_ssize_t n, o, c, i, j, kh, kw, ii, jj
    cdef real gv
    out_arr = np.zeros((O, C, 3, 3), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    gv = g[n, o, i, j]
                    for c in range(C):
                        for kh in range(3):
                            ii = i + kh - 1
                            if ii < 0 or ii >= H:
                                continue
                            for kw in range(3):
                                jj = j + kw - 1
                                if jj < 0 or jj >= W:
                                    continue
                                out[o, c, kh, kw] = out[o, c, kh, kw] + gv * x[n, c, ii, jj]
    return out_arr


def avgpool3x3(const real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j, ii, jj, cnt
    cdef real acc
    out_arr = np.zeros((N, C, H, W), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0
                    cnt = 0
                    for ii in range(i - 1, i + 2):
                        if ii < 0 or ii >= H:
                            continue
                        for jj in range(j - 1, j + 2):
                            if jj < 0 or jj >= W:
                                continue
                            acc = acc + x[n, c, ii, jj]
                            cnt = cnt + 1
                    out[n, c, i, j] = acc / cnt
    return out_arr


def avgpool3x3_grad(const real[:, :, :, ::1] g):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t n, c, i, j, ii, jj, cnt
    cdef real share
    out_arr = np.zeros((N, C, H, W), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    cnt = (min(i + 2, H) - max(i - 1, 0)) * (min(j + 2, W) - max(j - 1, 0))
                    share = g[n, c, i, j] / cnt
                    for ii in range(max(i - 1, 0), min(i + 2, H)):
                        for jj in range(max(j - 1, 0), min(j + 2, W)):
                            out[n, c, ii, jj] = out[n, c, ii, jj] + share
    return out_arr
