# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython convolution kernels (compiled backend).

Same contracts as lightnl.kernels._pure; float64 NHWC only.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(cnp.ndarray x_in, cnp.ndarray w_in, int stride, int pad):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], ci = x.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], co = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    y_out = np.zeros((n, ho, wo, co), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_out
    cdef int b, oi, oj, i, j, c, o, ii, jj
    cdef double v
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                for i in range(kh):
                    ii = oi * stride + i - pad
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(kw):
                        jj = oj * stride + j - pad
                        if jj < 0 or jj >= wd:
                            continue
                        for c in range(ci):
                            v = x[b, ii, jj, c]
                            if v == 0.0:
                                continue
                            for o in range(co):
                                y[b, oi, oj, o] += v * w[i, j, c, o]
    return y_out


def conv2d_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray dy_in,
                    int stride, int pad):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[:, :, :, ::1] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], ci = x.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], co = w.shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    dx_out = np.zeros((n, h, wd, ci), dtype=np.float64)
    dw_out = np.zeros((kh, kw, ci, co), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_out
    cdef double[:, :, :, ::1] dw = dw_out
    cdef int b, oi, oj, i, j, c, o, ii, jj
    cdef double g
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                for i in range(kh):
                    ii = oi * stride + i - pad
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(kw):
                        jj = oj * stride + j - pad
                        if jj < 0 or jj >= wd:
                            continue
                        for c in range(ci):
                            for o in range(co):
                                g = dy[b, oi, oj, o]
                                dx[b, ii, jj, c] += g * w[i, j, c, o]
                                dw[i, j, c, o] += g * x[b, ii, jj, c]
    return dx_out, dw_out


def dwconv3x3_forward(cnp.ndarray x_in, cnp.ndarray w_in):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    y_out = np.zeros((n, h, wd, c), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_out
    cdef int b, oi, oj, i, j, k, ii, jj
    for b in range(n):
        for oi in range(h):
            for oj in range(wd):
                for i in range(3):
                    ii = oi + i - 1
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(3):
                        jj = oj + j - 1
                        if jj < 0 or jj >= wd:
                            continue
                        for k in range(c):
                            y[b, oi, oj, k] += x[b, ii, jj, k] * w[i, j, k]
    return y_out


def dwconv3x3_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray dy_in):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[:, :, :, ::1] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    dx_out = np.zeros((n, h, wd, c), dtype=np.float64)
    dw_out = np.zeros((3, 3, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_out
    cdef double[:, :, ::1] dw = dw_out
    cdef int b, oi, oj, i, j, k, ii, jj
    cdef double g
    for b in range(n):
        for oi in range(h):
            for oj in range(wd):
                for i in range(3):
                    ii = oi + i - 1
                    if ii < 0 or ii >= h:
                        continue
                    for j in range(3):
                        jj = oj + j - 1
                        if jj < 0 or jj >= wd:
                            continue
                        for k in range(c):
                            g = dy[b, oi, oj, k]
                            dx[b, ii, jj, k] += g * w[i, j, k]
                            dw[i, j, k] += g * x[b, ii, jj, k]
    return dx_out, dw_out
