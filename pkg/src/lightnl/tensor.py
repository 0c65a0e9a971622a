"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every op that participates in training
registers a backward rule; backward() walks the graph in reverse creation
order, which is a valid topological order and makes gradient accumulation
deterministic.

A process-wide multiply-add counter can be armed with count_madds(); the
ops that dominate cost (matmul, convolutions, linear) report their counts
to it. Elementwise work, normalization divisions and residual additions
are deliberately not counted, matching the analytic cost model.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DegenerateSliceError(ValueError):
    pass


class StaleGraphError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# multiply-add counter

class MaddCounter:
    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_ACTIVE_COUNTER = None


@contextmanager
def count_madds():
    """Arm the multiply-add counter; yields the counter object."""
    global _ACTIVE_COUNTER
    prev = _ACTIVE_COUNTER
    counter = MaddCounter()
    _ACTIVE_COUNTER = counter
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER = prev


def _tally(n):
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.add(n)


# ---------------------------------------------------------------------------
# graph mode

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


_ids = itertools.count()


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_id", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._id = next(_ids)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    """Build an op output; drops the graph when no parent needs gradients."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Populate .grad of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("backward already ran on this graph; re-run the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    # creation order is a topological order of the graph
    nodes.sort(key=lambda t: t._id, reverse=True)

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for t in nodes:
        if t._backward_fn is not None and t.grad is not None:
            t._backward_fn(t.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(dy):
        _accumulate(a, dy)
        _accumulate(b, dy)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bw(dy):
        _accumulate(a, dy)
        _accumulate(b, -dy)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(dy):
        _accumulate(a, dy * b.data)
        _accumulate(b, dy * a.data)

    return _result(a.data * b.data, (a, b), bw)


def scale(x, c):
    c = float(c)

    def bw(dy):
        _accumulate(x, dy * c)

    return _result(x.data * c, (x,), bw)


def add_scalar(x, c):
    c = float(c)

    def bw(dy):
        _accumulate(x, dy)

    return _result(x.data + c, (x,), bw)


def scale_by(x, s):
    """Multiply a tensor by a scalar (0-d) tensor; both receive gradients."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by expects a scalar tensor, got shape {s.shape}")

    def bw(dy):
        _accumulate(x, dy * float(s.data))
        if s.requires_grad:
            _accumulate(s, np.sum(dy * x.data))

    return _result(x.data * float(s.data), (x, s), bw)


def straight_through(hard_data, relaxed):
    """Forward the hard value bit-exactly; route gradients to the relaxed graph."""
    if hard_data.shape != relaxed.data.shape:
        raise ShapeError(
            f"straight_through shape mismatch: {hard_data.shape} vs {relaxed.shape}")

    def bw(dy):
        _accumulate(relaxed, dy)

    return _result(np.array(hard_data, dtype=np.float64), (relaxed,), bw)


def relu6(x):
    y = np.minimum(np.maximum(x.data, 0.0), 6.0)
    mask = (x.data > 0.0) & (x.data < 6.0)

    def bw(dy):
        _accumulate(x, dy * mask)

    return _result(y, (x,), bw)


def sigmoid(x):
    z = x.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def bw(dy):
        _accumulate(x, dy * y * (1.0 - y))

    return _result(y, (x,), bw)


def log(x):
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive input")

    def bw(dy):
        _accumulate(x, dy / x.data)

    return _result(np.log(x.data), (x,), bw)


def sum_all(x):
    def bw(dy):
        _accumulate(x, np.full_like(x.data, float(dy)))

    return _result(np.sum(x.data), (x,), bw)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(
            f"reshape element-count mismatch: {x.shape} ({x.data.size} elems) -> {shape}")

    def bw(dy):
        _accumulate(x, dy.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def transpose_2d(x):
    if x.data.ndim == 2:
        axes = (1, 0)
    elif x.data.ndim == 3:  # batched matrices
        axes = (0, 2, 1)
    else:
        raise ShapeError(f"transpose_2d expects a 2-d or batched 3-d tensor, got {x.shape}")

    def bw(dy):
        _accumulate(x, dy.transpose(axes))

    return _result(x.data.transpose(axes), (x,), bw)


# ---------------------------------------------------------------------------
# matrix / feature-map ops

def matmul(a, b):
    """2-d matrix product, or batched product for matching 3-d operands."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        n, m = a.shape
        m2, k = b.shape
        if m != m2:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
        _tally(n * m * k)
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul batch/inner dims disagree: {a.shape} vs {b.shape}")
        _tally(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    else:
        raise ShapeError(f"matmul expects both 2-d or both 3-d: {a.shape} vs {b.shape}")

    def bw(dy):
        if a.requires_grad:
            _accumulate(a, dy @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ dy)

    return _result(a.data @ b.data, (a, b), bw)


def slice_channels_prefix(x, ratio):
    """Keep the first floor(ratio*C) channels of the last axis."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"channel ratio must be in (0, 1], got {ratio}")
    c = x.shape[-1]
    keep = int(np.floor(ratio * c))
    if keep < 1:
        raise DegenerateSliceError(
            f"ratio {ratio} keeps floor({ratio}*{c}) = 0 channels")

    def bw(dy):
        g = np.zeros_like(x.data)
        g[..., :keep] = dy
        _accumulate(x, g)

    return _result(np.ascontiguousarray(x.data[..., :keep]), (x,), bw)


def slice_last_axis(x, lo, hi):
    """Keep columns [lo, hi) of the last axis; backward scatters into the range."""
    c = x.shape[-1]
    if not 0 <= lo < hi <= c:
        raise ShapeError(f"slice range [{lo}, {hi}) invalid for {c} channels")

    def bw(dy):
        g = np.zeros_like(x.data)
        g[..., lo:hi] = dy
        _accumulate(x, g)

    return _result(np.ascontiguousarray(x.data[..., lo:hi]), (x,), bw)


def spatial_subsample(x, stride):
    """Keep positions with row/col indices divisible by stride (NHWC or HWC)."""
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim == 4:
        sl = (slice(None), slice(None, None, stride), slice(None, None, stride))
    elif x.data.ndim == 3:
        sl = (slice(None, None, stride), slice(None, None, stride))
    else:
        raise ShapeError(f"spatial_subsample expects HWC or NHWC, got {x.shape}")

    def bw(dy):
        g = np.zeros_like(x.data)
        g[sl] = dy
        _accumulate(x, g)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), bw)


def conv1x1(x, w, bias=None):
    """Per-position linear map on the channel axis of an NHWC feature map."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv1x1 channel mismatch: input {x.shape} vs weight {w.shape}")
    n, h, wd, _ = x.shape
    _tally(n * h * wd * w.shape[0] * w.shape[1])
    y = np.tensordot(x.data, w.data, axes=([3], [0]))
    if bias is not None:
        y = y + bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(dy):
        if x.requires_grad:
            _accumulate(x, np.tensordot(dy, w.data, axes=([3], [1])))
        if w.requires_grad:
            _accumulate(w, np.tensordot(x.data, dy, axes=([0, 1, 2], [0, 1, 2])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, dy.sum(axis=(0, 1, 2)))

    return _result(y, parents, bw)


def depthwise_conv3x3(x, w):
    """Per-channel 3x3 convolution, stride 1, padding 1 (shape preserving)."""
    if w.shape != (3, 3, x.shape[-1]):
        raise ShapeError(
            f"depthwise kernel must be (3, 3, {x.shape[-1]}), got {w.shape}")
    n, h, wd, c = x.shape
    _tally(n * h * wd * c * 9)
    y = kernels.dwconv3x3_forward(x.data, w.data)

    def bw(dy):
        dx, dwk = kernels.dwconv3x3_backward(x.data, w.data, dy)
        _accumulate(x, dx)
        _accumulate(w, dwk)

    return _result(y, (x, w), bw)


def conv2d(x, w, stride=1, pad=None):
    """NHWC convolution with (kh, kw, C_in, C_out) weights."""
    kh, kw, ci, co = w.shape
    if x.shape[-1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if pad is None:
        pad = kh // 2
    stride = int(stride)
    n, h, wd, _ = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    _tally(n * ho * wo * kh * kw * ci * co)
    y = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def bw(dy):
        dx, dwk = kernels.conv2d_backward(x.data, w.data, dy, stride, pad)
        _accumulate(x, dx)
        _accumulate(w, dwk)

    return _result(y, (x, w), bw)


def global_avg_pool(x):
    n, h, wd, c = x.shape
    y = x.data.mean(axis=(1, 2))

    def bw(dy):
        _accumulate(x, np.broadcast_to(dy[:, None, None, :] / (h * wd), x.data.shape))

    return _result(y, (x,), bw)


def linear(x, w, b=None):
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} vs {w.shape}")
    n, f = x.shape
    _tally(n * f * w.shape[1])
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(dy):
        if x.requires_grad:
            _accumulate(x, dy @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ dy)
        if b is not None and b.requires_grad:
            _accumulate(b, dy.sum(axis=0))

    return _result(y, parents, bw)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; labels are integer class ids."""
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax_cross_entropy: non-finite logits")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    # log-softmax form keeps the loss finite even for saturated logits
    logp = z[np.arange(n), labels] - np.log(denom[:, 0])
    loss = -np.mean(logp)

    def bw(dy):
        g = p.copy()
        g[np.arange(n), labels] -= 1.0
        _accumulate(logits, float(dy) * g / n)

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels, momentum=0.99, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta]


def batchnorm(x, state, mode):
    """Normalize an NHWC map over (N, H, W) per channel."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    axes = (0, 1, 2)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv
    y = state.gamma.data * xhat + state.beta.data
    gamma, beta = state.gamma, state.beta
    m = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]

    def bw(dy):
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(dy * xhat, axis=axes))
        if beta.requires_grad:
            _accumulate(beta, np.sum(dy, axis=axes))
        if x.requires_grad:
            if mode == "train":
                dxhat = dy * gamma.data
                dx = inv * (dxhat
                            - dxhat.mean(axis=axes)
                            - xhat * np.mean(dxhat * xhat, axis=axes))
                _accumulate(x, dx)
            else:
                _accumulate(x, dy * gamma.data * inv)

    return _result(y, (x, gamma, beta), bw)
