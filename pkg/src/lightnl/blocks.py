"""Non-local operator variants and their residual wrappers.

The family, from heaviest to lightest:
  * full:          y = (1/C(x)) theta(x) theta(x)^T g(x), wrapped z = Wz y + x
  * shared:        y = (1/C(x)) g(x) g(x)^T g(x)
  * transformless: y = (1/C(x)) x x^T x
  * compact:       y = (1/C(x)) x_c x_sc^T x_s  on channel/spatial-downsampled features
  * lightnl:       compact operation wrapped as z = DepthwiseConv3x3(y, wd) + x

The three-matrix chain is evaluated in whichever association order costs
fewer multiply-adds for the actual feature dimensions. The operator treats
each batch entry independently; affinities are never shared across samples.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

NORM_POSITION_COUNT = "position_count"
NORM_NONE = "none"

LEFT_FIRST = "left"
RIGHT_FIRST = "right"


@dataclass(frozen=True)
class NLConfig:
    channel_ratio: float = 1.0
    spatial_stride: int = 1
    normalization: str = NORM_POSITION_COUNT

    def __post_init__(self):
        if not 0.0 < self.channel_ratio <= 1.0:
            raise ValueError(f"channel_ratio must be in (0, 1], got {self.channel_ratio}")
        if self.spatial_stride < 1:
            raise ValueError(f"spatial_stride must be >= 1, got {self.spatial_stride}")
        if self.normalization not in (NORM_POSITION_COUNT, NORM_NONE):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class CompactFeatures:
    """Batched (N, positions, channels) views of one feature map.

    x_c:  all positions, channel prefix   (N, H*W,  floor(r*C))
    x_sc: kept positions, channel prefix  (N, H'*W', floor(r*C))
    x_s:  kept positions, all channels    (N, H'*W', C)
    """

    x_c: T.Tensor
    x_sc: T.Tensor
    x_s: T.Tensor


@dataclass
class FullNLParams:
    theta_w: T.Tensor
    g_w: T.Tensor
    wz_w: T.Tensor

    def params(self):
        return [self.theta_w, self.g_w, self.wz_w]


@dataclass
class LightNLParams:
    wd: T.Tensor  # (3, 3, C) depthwise kernel

    def params(self):
        return [self.wd]


def assoc_costs(p, p_s, c_r, c):
    """Multiply-add cost of each association order of x_c x_sc^T x_s."""
    left = p * p_s * c_r + p * p_s * c
    right = p_s * c_r * c + p * c_r * c
    return left, right


def choose_assoc_order(dims):
    """Pick the cheaper association order for dims (P, P_s, C_r, C); ties go right."""
    left, right = assoc_costs(*dims)
    return LEFT_FIRST if left < right else RIGHT_FIRST


def extract_compact(x, cfg):
    """Form the (x_c, x_sc, x_s) triplet from an NHWC feature map."""
    n, h, w, c = x.shape
    cr = int(np.floor(cfg.channel_ratio * c))
    s = cfg.spatial_stride
    hp = -(-h // s)
    wp = -(-w // s)
    x_c = T.reshape(T.slice_channels_prefix(x, cfg.channel_ratio), (n, h * w, cr))
    xs_map = T.spatial_subsample(x, s)
    x_s = T.reshape(xs_map, (n, hp * wp, c))
    x_sc = T.reshape(T.slice_channels_prefix(xs_map, cfg.channel_ratio), (n, hp * wp, cr))
    return CompactFeatures(x_c=x_c, x_sc=x_sc, x_s=x_s)


def _chain(x_c, x_sc, x_s, order):
    if order == LEFT_FIRST:
        return T.matmul(T.matmul(x_c, T.transpose_2d(x_sc)), x_s)
    return T.matmul(x_c, T.matmul(T.transpose_2d(x_sc), x_s))


def nl_compact(x, cfg, order="auto"):
    """Compact non-local operation on downsampled features; output is NHWC like x."""
    n, h, w, c = x.shape
    feats = extract_compact(x, cfg)
    p = feats.x_c.shape[1]
    p_s, cr = feats.x_sc.shape[1], feats.x_sc.shape[2]
    if order == "auto":
        order = choose_assoc_order((p, p_s, cr, c))
    y = _chain(feats.x_c, feats.x_sc, feats.x_s, order)
    if cfg.normalization == NORM_POSITION_COUNT:
        y = T.scale(y, 1.0 / p_s)
    return T.reshape(y, (n, h, w, c))


def nl_transformless(x, normalization=NORM_POSITION_COUNT, order="auto"):
    """y = (1/C(x)) x x^T x; the compact operation with no downsampling."""
    cfg = NLConfig(channel_ratio=1.0, spatial_stride=1, normalization=normalization)
    return nl_compact(x, cfg, order=order)


def nl_shared(x, g_w, normalization=NORM_POSITION_COUNT, order="auto"):
    """y = (1/C(x)) g(x) g(x)^T g(x) with one shared 1x1 transform."""
    if g_w.shape[0] != g_w.shape[1] or g_w.shape[0] != x.shape[-1]:
        raise T.ShapeError(f"g must be square on C={x.shape[-1]}, got {g_w.shape}")
    gx = T.conv1x1(x, g_w)
    return nl_transformless(gx, normalization=normalization, order=order)


def nl_full(x, params, normalization=NORM_POSITION_COUNT, order="auto"):
    """z = Wz y + x with y = (1/C(x)) theta(x) theta(x)^T g(x).

    order="left" forces affinity-first evaluation (the conventional layout);
    "auto" picks the cheaper association for the actual dimensions.
    """
    c = x.shape[-1]
    for wmat in (params.theta_w, params.g_w, params.wz_w):
        if wmat.shape != (c, c):
            raise T.ShapeError(f"full-NL weights must be ({c}, {c}), got {wmat.shape}")
    n, h, w, _ = x.shape
    p = h * w
    tx = T.reshape(T.conv1x1(x, params.theta_w), (n, p, c))
    gx = T.reshape(T.conv1x1(x, params.g_w), (n, p, c))
    if order == "auto":
        order = choose_assoc_order((p, p, c, c))
    y = _chain(tx, tx, gx, order)
    if normalization == NORM_POSITION_COUNT:
        y = T.scale(y, 1.0 / p)
    y = T.reshape(y, (n, h, w, c))
    return T.add(T.conv1x1(y, params.wz_w), x)


def lightnl_block(x, params, cfg, order="auto"):
    """z = DepthwiseConv3x3(y, wd) + x with y the compact non-local output."""
    y = nl_compact(x, cfg, order=order)
    return T.add(T.depthwise_conv3x3(y, params.wd), x)
