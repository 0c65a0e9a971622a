"""Verification suites behind the grad-check and nl-equiv CLI commands.

Each suite returns a JSON-serializable payload plus an overall pass flag;
the tolerances are fixed here, not configurable, so a green result always
means the same thing.
"""

import numpy as np

from . import blocks, cost, nas_search, supernet
from . import tensor as T
from .gradcheck import grad_check, sample_smooth

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-10


def _weighted_sum(out, r):
    return T.sum_all(T.mul(out, T.Tensor(r)))


def _grad_cases(rng):
    """(name, fn, params) triples covering every registered op."""
    cases = []

    a = T.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    r = rng.standard_normal((5, 3))
    cases.append(("matmul", lambda a, b: _weighted_sum(T.matmul(a, b), r), [a, b]))

    x = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    r2 = rng.standard_normal((4, 6))
    cases.append(("reshape", lambda x: _weighted_sum(T.reshape(x, (4, 6)), r2), [x]))

    m = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    r3 = rng.standard_normal((5, 3))
    cases.append(("transpose_2d",
                  lambda m: _weighted_sum(T.transpose_2d(m), r3), [m]))

    u = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    v = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    r4 = rng.standard_normal((4, 4))
    cases.append(("add", lambda u, v: _weighted_sum(T.add(u, v), r4), [u, v]))
    cases.append(("mul", lambda u, v: _weighted_sum(T.mul(u, v), r4), [u, v]))
    cases.append(("scale", lambda u: _weighted_sum(T.scale(u, 1.7), r4), [u]))

    xr = T.Tensor(sample_smooth(rng, (4, 4)) * 3.0, requires_grad=True)
    cases.append(("relu6", lambda x: _weighted_sum(T.relu6(x), r4), [xr]))
    cases.append(("sigmoid", lambda u: _weighted_sum(T.sigmoid(u), r4), [u]))

    pos = T.Tensor(rng.uniform(0.5, 2.0, (4, 4)), requires_grad=True)
    cases.append(("log", lambda p: _weighted_sum(T.log(p), r4), [pos]))

    fm = T.Tensor(rng.standard_normal((2, 4, 4, 8)), requires_grad=True)
    rs = rng.standard_normal((2, 4, 4, 2))
    cases.append(("slice_channels_prefix",
                  lambda f: _weighted_sum(T.slice_channels_prefix(f, 0.25), rs), [fm]))
    rss = rng.standard_normal((2, 2, 2, 8))
    cases.append(("spatial_subsample",
                  lambda f: _weighted_sum(T.spatial_subsample(f, 2), rss), [fm]))

    w11 = T.Tensor(rng.standard_normal((8, 6)), requires_grad=True)
    r11 = rng.standard_normal((2, 4, 4, 6))
    cases.append(("conv1x1",
                  lambda f, w: _weighted_sum(T.conv1x1(f, w), r11), [fm, w11]))

    wd = T.Tensor(rng.standard_normal((3, 3, 8)), requires_grad=True)
    rdw = rng.standard_normal((2, 4, 4, 8))
    cases.append(("depthwise_conv3x3",
                  lambda f, w: _weighted_sum(T.depthwise_conv3x3(f, w), rdw), [fm, wd]))

    wc = T.Tensor(rng.standard_normal((3, 3, 8, 5)), requires_grad=True)
    rc = rng.standard_normal((2, 2, 2, 5))
    cases.append(("conv2d",
                  lambda f, w: _weighted_sum(T.conv2d(f, w, stride=2, pad=1), rc),
                  [fm, wc]))

    bn = T.BatchNormState(8)
    rbn = rng.standard_normal((2, 4, 4, 8))
    cases.append(("batchnorm",
                  lambda f, g, bta: _weighted_sum(T.batchnorm(f, bn, "train"), rbn),
                  [fm, bn.gamma, bn.beta]))

    rgap = rng.standard_normal((2, 8))
    cases.append(("global_avg_pool",
                  lambda f: _weighted_sum(T.global_avg_pool(f), rgap), [fm]))

    xl = T.Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    wl = T.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    bl = T.Tensor(rng.standard_normal(4), requires_grad=True)
    rl = rng.standard_normal((3, 4))
    cases.append(("linear",
                  lambda x, w, b: _weighted_sum(T.linear(x, w, b), rl), [xl, wl, bl]))

    logits = T.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    cases.append(("softmax_cross_entropy",
                  lambda lg: T.softmax_cross_entropy(lg, labels), [logits]))

    sc = T.Tensor(rng.standard_normal(()), requires_grad=True)
    cases.append(("scale_by", lambda u, s: _weighted_sum(T.scale_by(u, s), r4), [u, sc]))

    # lightweight non-local block end to end
    xnl = T.Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
    wnl = T.Tensor(rng.standard_normal((3, 3, 8)) * 0.3, requires_grad=True)
    cfg = blocks.NLConfig(channel_ratio=0.25, spatial_stride=2)
    rnl = rng.standard_normal((1, 4, 4, 8))
    cases.append(("lightnl_block",
                  lambda x, w: _weighted_sum(
                      blocks.lightnl_block(x, blocks.LightNLParams(wd=w), cfg), rnl),
                  [xnl, wnl]))

    # relaxed insert gate (the differentiable surrogate of the hard gate)
    wg = T.Tensor(rng.standard_normal((3, 3, 4)) * 0.4, requires_grad=True)
    tg = T.Tensor(np.asarray(0.3), requires_grad=True)
    rg = rng.standard_normal((3, 3, 4))
    cases.append(("gate_insert_relaxed",
                  lambda w, t: _weighted_sum(
                      T.scale_by(w, cost.relaxed_insert_prob(w, t, 1.0)), rg),
                  [wg, tg]))

    return cases


def _expected_cost_case(seed):
    nspec = supernet.toy_spec(input_hw=(16, 16))
    net = supernet.Network(nspec, mode="search", seed=seed)
    state = nas_search.init_search_state(net.search_sites())
    rng = np.random.default_rng(seed + 1)
    for loc in state.locations.values():
        loc.ema_channel = np.append(rng.uniform(0.05, 0.5, loc.n_channel - 1), 0.0)
        loc.ema_spatial = np.append(rng.uniform(0.05, 0.5, loc.n_spatial - 1), 0.0)
        loc.t_channel.data[...] = rng.uniform(0.0, 0.6)
        loc.t_spatial.data[...] = rng.uniform(0.0, 0.6)
    params = state.thresholds()

    def fn(*params):
        return cost.expected_cost(state, net)

    return fn, params


def run_grad_suite(seed=0):
    """Finite-difference checks for every op plus the relaxed expected cost."""
    rng = np.random.default_rng(seed)
    entries = {}
    for name, fn, params in _grad_cases(rng):
        report = grad_check(fn, params, tol=GRAD_TOL)
        entries[name] = report.max_rel_err

    fn, params = _expected_cost_case(seed)
    # the expected cost is ~1e5 madds; check gradients in relative terms
    scaled = lambda *p: T.scale(fn(*p), 1e-5)
    entries["expected_cost"] = grad_check(scaled, params, tol=GRAD_TOL).max_rel_err

    ok = all(v < GRAD_TOL for v in entries.values())
    return {"tolerance": GRAD_TOL, "max_rel_errors": entries, "passed": ok}


def _rel_dev(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def run_equiv_suite(seed=0, trials=100):
    """Associativity, reduction and affinity-reuse equivalence checks."""
    rng = np.random.default_rng(seed)
    payload = {}

    dev = 0.0
    for _ in range(trials):
        h, w = rng.integers(2, 9, size=2)
        c = int(rng.integers(2, 17))
        x = T.Tensor(rng.standard_normal((1, h, w, c)))
        cfg = blocks.NLConfig(channel_ratio=float(rng.choice([0.25, 0.5, 1.0])),
                              spatial_stride=int(rng.choice([1, 2])))
        try:
            left = blocks.nl_compact(x, cfg, order=blocks.LEFT_FIRST)
        except T.DegenerateSliceError:
            continue
        right = blocks.nl_compact(x, cfg, order=blocks.RIGHT_FIRST)
        dev = max(dev, _rel_dev(left.data, right.data))
    payload["associativity_max_rel_dev"] = dev

    red = 0.0
    for _ in range(20):
        x = T.Tensor(rng.standard_normal((1, 4, 4, 6)))
        eye = T.Tensor(np.eye(6))
        base = blocks.nl_transformless(x)
        full = blocks.nl_full(x, blocks.FullNLParams(theta_w=eye, g_w=eye, wz_w=eye))
        red = max(red, _rel_dev(full.data, base.data + x.data))
        shared = blocks.nl_shared(x, eye)
        red = max(red, _rel_dev(shared.data, base.data))
        compact = blocks.nl_compact(x, blocks.NLConfig(1.0, 1))
        red = max(red, float(np.max(np.abs(compact.data - base.data))))
    payload["reduction_max_rel_dev"] = red

    reuse = 0.0
    counts_equal = True
    cset = nas_search.CandidateSet(channel_ratios=(0.125, 0.25, 0.5, 1.0),
                                   spatial_strides=(2, 1))
    for _ in range(trials):
        x = T.Tensor(rng.standard_normal((1, 4, 4, 8)))
        with T.count_madds() as ctr:
            affs = nas_search.affinity_with_reuse(x, cset, stride=2)
        reuse_count = ctr.total
        with T.count_madds() as ctr:
            feats = blocks.extract_compact(x, blocks.NLConfig(1.0, 2))
            direct_dense = T.matmul(feats.x_c, T.transpose_2d(feats.x_sc))
        counts_equal = counts_equal and reuse_count == ctr.total
        for ratio, a in zip(cset.channel_ratios, affs):
            feats_r = blocks.extract_compact(x, blocks.NLConfig(ratio, 2))
            direct = T.matmul(feats_r.x_c, T.transpose_2d(feats_r.x_sc))
            reuse = max(reuse, _rel_dev(a.data, direct.data))
    payload["reuse_max_rel_dev"] = reuse
    payload["reuse_counts_equal"] = counts_equal

    ok = (payload["associativity_max_rel_dev"] <= EQUIV_TOL
          and payload["reduction_max_rel_dev"] <= EQUIV_TOL
          and payload["reuse_max_rel_dev"] <= EQUIV_TOL
          and counts_equal)
    payload["tolerance"] = EQUIV_TOL
    payload["passed"] = ok
    return payload
