"""Convolution kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly;
setting LIGHTNL_PURE=1 forces the numpy fallback. Both backends share
the same signatures and are compared in benchmarks/bench_kernels.py.
"""

import os

from . import _pure

if os.environ.get("LIGHTNL_PURE") == "1":
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _fastconv as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

def conv2d_forward(x, w, stride, pad):
    # 1x1 kernels reduce to a matrix product where BLAS beats the
    # compiled spatial loop, so they always take the numpy path
    if w.shape[0] == 1 and w.shape[1] == 1:
        return _pure.conv2d_forward(x, w, stride, pad)
    return _impl.conv2d_forward(x, w, stride, pad)


def conv2d_backward(x, w, dy, stride, pad):
    if w.shape[0] == 1 and w.shape[1] == 1:
        return _pure.conv2d_backward(x, w, dy, stride, pad)
    return _impl.conv2d_backward(x, w, dy, stride, pad)


dwconv3x3_forward = _impl.dwconv3x3_forward
dwconv3x3_backward = _impl.dwconv3x3_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "dwconv3x3_forward",
    "dwconv3x3_backward",
]
