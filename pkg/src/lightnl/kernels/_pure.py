"""Pure-numpy convolution kernels (fallback backend).

All arrays are NHWC float64 (float32 accepted, promoted by numpy rules).
Shapes follow the conventions of the tensor layer:
    conv2d weight:      (kh, kw, C_in, C_out)
    depthwise weight:   (3, 3, C)
"""

import numpy as np


def _im2col(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + ho * stride : stride, j : j + wo * stride : stride, :
            ]
    return cols, ho, wo


def conv2d_forward(x, w, stride, pad):
    kh, kw, _, _ = w.shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    return np.tensordot(cols, w, axes=([3, 4, 5], [0, 1, 2]))


def conv2d_backward(x, w, dy, stride, pad):
    n, h, wdt, _ = x.shape
    kh, kw, ci, co = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    dw = np.tensordot(cols, dy, axes=([0, 1, 2], [0, 1, 2]))
    # scatter dy*w back into the padded input
    dcols = np.tensordot(dy, w, axes=([3], [3]))  # (n, ho, wo, kh, kw, ci)
    dxp = np.zeros((n, h + 2 * pad, wdt + 2 * pad, ci), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    dx = dxp[:, pad : pad + h, pad : pad + wdt, :]
    return dx, dw


def dwconv3x3_forward(x, w):
    n, h, wdt, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    y = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            y += xp[:, i : i + h, j : j + wdt, :] * w[i, j, :]
    return y


def dwconv3x3_backward(x, w, dy):
    n, h, wdt, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wdt, :] += dy * w[i, j, :]
            dw[i, j, :] = np.sum(xp[:, i : i + h, j : j + wdt, :] * dy, axis=(0, 1, 2))
    dx = dxp[:, 1 : 1 + h, 1 : 1 + wdt, :]
    return dx, dw
