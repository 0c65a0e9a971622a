"""Shared independent oracles for the test suite.

These are deliberately naive implementations (explicit loops, no reuse of
the library's vectorized code paths) so that agreement is meaningful.
"""

import numpy as np
import pytest


def naive_matmul(a, b):
    """Triple-loop matrix product."""
    n, m = a.shape
    m2, k = b.shape
    assert m == m2
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for l in range(m):
                s += a[i, l] * b[l, j]
            out[i, j] = s
    return out


def naive_conv1x1(x, w):
    """Per-position loop oracle for a pointwise convolution."""
    n, h, ww, ci = x.shape
    co = w.shape[1]
    out = np.zeros((n, h, ww, co))
    for b in range(n):
        for i in range(h):
            for j in range(ww):
                out[b, i, j] = x[b, i, j] @ w
    return out


def naive_dwconv3x3(x, w):
    """Sliding-window loop oracle: per-channel 3x3, padding 1, stride 1."""
    n, h, ww, c = x.shape
    out = np.zeros_like(x)
    for b in range(n):
        for i in range(h):
            for j in range(ww):
                for ch in range(c):
                    s = 0.0
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < ww:
                                s += x[b, ii, jj, ch] * w[di, dj, ch]
                    out[b, i, j, ch] = s
    return out


def naive_conv2d(x, w, stride, pad):
    """Per-output-position loop oracle for a dense convolution."""
    n, h, ww, ci = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, co))
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                for oc in range(co):
                    s = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            ii = oi * stride + di - pad
                            jj = oj * stride + dj - pad
                            if 0 <= ii < h and 0 <= jj < ww:
                                s += float(x[b, ii, jj] @ w[di, dj, :, oc])
                    out[b, oi, oj, oc] = s
    return out


def naive_nl(x_flat, theta_w=None, g_w=None, norm=1.0):
    """Naive three-matmul non-local oracle on a (P, C) matrix."""
    th = x_flat if theta_w is None else naive_matmul(x_flat, theta_w)
    g = x_flat if g_w is None else naive_matmul(x_flat, g_w)
    aff = naive_matmul(th, th.T)
    return naive_matmul(aff, g) / norm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
