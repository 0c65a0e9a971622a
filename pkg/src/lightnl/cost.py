"""Analytic multiply-add accounting and the differentiable expected cost.

Conventions: 1 multiply-add = 1 FLOP (the mobile-networks convention under
which MobileNetV2-1.0 is ~300M). Normalization divisions and residual
additions are excluded, matching common counters and the runtime counter
in the tensor layer.
"""

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import blocks
from . import tensor as T

VARIANT_FULL_NAIVE = "full_naive"   # full transforms, affinity-first order
VARIANT_FULL = "full"               # full transforms, cheaper association
VARIANT_SHARED = "shared"
VARIANT_TRANSFORMLESS = "transformless"
VARIANT_COMPACT = "compact"
VARIANT_LIGHTNL = "lightnl"

ALL_VARIANTS = (
    VARIANT_FULL_NAIVE,
    VARIANT_FULL,
    VARIANT_SHARED,
    VARIANT_TRANSFORMLESS,
    VARIANT_COMPACT,
    VARIANT_LIGHTNL,
)

# rows of the ablation ladder, heaviest first
LADDER_VARIANTS = (
    VARIANT_FULL,
    VARIANT_SHARED,
    VARIANT_TRANSFORMLESS,
    VARIANT_COMPACT,
    VARIANT_LIGHTNL,
)


@dataclass
class FlopsReport:
    entries: list = field(default_factory=list)  # (site, kind, madds)

    def add(self, site, kind, madds):
        self.entries.append((site, kind, int(madds)))

    @property
    def total(self):
        return sum(m for _, _, m in self.entries)

    def to_dict(self):
        return {
            "entries": [
                {"site": s, "kind": k, "madds": m} for s, k, m in self.entries
            ],
            "total": self.total,
        }


def flops_matmul(n, m, k):
    return n * m * k


def flops_conv1x1(h, w, c_in, c_out):
    return h * w * c_in * c_out


def flops_dwconv3x3(h, w, c):
    return h * w * c * 9


def flops_conv2d(h, w, kh, kw, c_in, c_out, stride=1, pad=None):
    if pad is None:
        pad = kh // 2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return kh * kw * ho * wo * c_in * c_out


def _compact_dims(shape, cfg):
    h, w, c = shape
    p = h * w
    p_s = math.ceil(h / cfg.spatial_stride) * math.ceil(w / cfg.spatial_stride)
    c_r = int(np.floor(cfg.channel_ratio * c))
    return p, p_s, c_r, c


def flops_nl_variant(variant, shape, cfg=None):
    """Analytic multiply-adds of one non-local variant at a (H, W, C) site."""
    h, w, c = shape
    p = h * w
    if variant in (VARIANT_COMPACT, VARIANT_LIGHTNL):
        if cfg is None:
            raise ValueError(f"{variant} requires an NLConfig")
        dims = _compact_dims(shape, cfg)
    else:
        dims = (p, p, c, c)
    left, right = blocks.assoc_costs(*dims)
    chain = min(left, right)

    if variant == VARIANT_FULL_NAIVE:
        return 2 * flops_conv1x1(h, w, c, c) + left + flops_conv1x1(h, w, c, c)
    if variant == VARIANT_FULL:
        return 2 * flops_conv1x1(h, w, c, c) + chain + flops_conv1x1(h, w, c, c)
    if variant == VARIANT_SHARED:
        return flops_conv1x1(h, w, c, c) + chain + flops_conv1x1(h, w, c, c)
    if variant == VARIANT_TRANSFORMLESS:
        return chain + flops_conv1x1(h, w, c, c)
    if variant == VARIANT_COMPACT:
        return chain + flops_conv1x1(h, w, c, c)
    if variant == VARIANT_LIGHTNL:
        return chain + flops_dwconv3x3(h, w, c)
    raise ValueError(f"unknown non-local variant {variant!r}")


def default_lightnl_cfg(shape):
    """25% channels; spatial stride 2 only for maps larger than 14x14."""
    h, w, _ = shape
    stride = 2 if min(h, w) > 14 else 1
    return blocks.NLConfig(channel_ratio=0.25, spatial_stride=stride)


def load_mobilenetv2_sites():
    with resources.files("lightnl.data_files").joinpath(
            "mobilenetv2_sites.json").open() as f:
        doc = json.load(f)
    return [(s["h"], s["w"], s["c"]) for s in doc["sites"]]


def table1_ladder(shapes=None):
    """Delta-FLOPs of each variant inserted at every site of a backbone.

    Returns per-variant totals, the heaviest-to-lightest ladder, and the
    cost ratio of the naive full block to the lightweight block.
    """
    if shapes is None:
        shapes = load_mobilenetv2_sites()
    totals = {}
    for variant in ALL_VARIANTS:
        total = 0
        for shape in shapes:
            cfg = default_lightnl_cfg(shape)
            total += flops_nl_variant(variant, shape, cfg)
        totals[variant] = total
    ladder = [(v, totals[v]) for v in LADDER_VARIANTS]
    return {
        "totals": totals,
        "ladder": ladder,
        "ladder_strictly_decreasing": all(
            a[1] > b[1] for a, b in zip(ladder, ladder[1:])
        ),
        "ratio_full_naive_over_lightnl": totals[VARIANT_FULL_NAIVE]
        / totals[VARIANT_LIGHTNL],
    }


# ---------------------------------------------------------------------------
# differentiable expected cost

def _one_minus(t):
    return T.add_scalar(T.scale(t, -1.0), 1.0)


def relaxed_select_probs(threshold, distances, tau):
    """Sigmoid relaxation of the select-smallest-passing-candidate chain.

    threshold is a scalar tensor, distances a sequence of floats. Candidate i
    fires when its distance is below the threshold and no earlier one fired;
    the last candidate absorbs the fall-through mass, so the probabilities
    always sum to one.
    """
    n = len(distances)
    probs = []
    survive = None
    for i, d in enumerate(distances[:-1]):
        s_i = T.sigmoid(T.scale(T.add_scalar(threshold, -float(d)), 1.0 / tau))
        p_i = s_i if survive is None else T.mul(survive, s_i)
        probs.append(p_i)
        not_i = _one_minus(s_i)
        survive = not_i if survive is None else T.mul(survive, not_i)
    probs.append(survive if n > 1 else T.Tensor(1.0))
    return probs


def relaxed_insert_prob(wd, t_insert, tau):
    """sigma((||wd||^2 - t) / tau) with gradients to both wd and t."""
    nsq = T.sum_all(T.mul(wd, wd))
    return T.sigmoid(T.scale(T.sub(nsq, t_insert), 1.0 / tau))


def expected_cost(state, supernet):
    """Differentiable total cost: backbone plus gate-relaxed candidate costs.

    Every hard indicator of the search (insert, channel ratio, spatial
    stride) is replaced by its sigmoid relaxation in both the value and the
    gradient of this term, so the result is smooth in all thresholds and in
    the depthwise kernels.
    """
    total = T.Tensor(float(supernet.backbone_madds()))
    for site in supernet.search_sites():
        loc = state.locations[site.site_id]
        p_ins = relaxed_insert_prob(site.wd, loc.t_insert, state.tau)
        pc = relaxed_select_probs(loc.t_channel, loc.channel_distances(), state.tau)
        ps = relaxed_select_probs(loc.t_spatial, loc.spatial_distances(), state.tau)
        site_cost = None
        for i, pci in enumerate(pc):
            for j, psj in enumerate(ps):
                term = T.scale(T.mul(pci, psj), float(site.candidate_costs[i][j]))
                site_cost = term if site_cost is None else T.add(site_cost, term)
        total = T.add(total, T.mul(p_ins, site_cost))
    return total
