"""Toy MobileNetV2-style backbone with candidate non-local insertion sites.

Three flavours share one weight layout: a plain network, a network with
manually inserted lightweight non-local blocks, and a search-mode supernet
whose sites carry gated depthwise kernels plus candidate bookkeeping.
Site parameters are created after all block weights so that a network with
zero inserts draws exactly the same random weights as the plain one.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks, cost, nas_search
from . import tensor as T


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    expansion: int
    in_ch: int
    out_ch: int
    stride: int = 1
    has_lightnl_site: bool = True

    @property
    def residual(self):
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class NetworkSpec:
    input_hw: tuple = (32, 32)
    input_channels: int = 1
    stem_channels: int = 8
    stem_stride: int = 2
    blocks: tuple = ()
    num_classes: int = 10

    def __post_init__(self):
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_ch != prev:
                raise SpecError(
                    f"block {i} expects {b.in_ch} input channels but gets {prev}")
            prev = b.out_ch

    def to_dict(self):
        return {
            "input_hw": list(self.input_hw),
            "input_channels": self.input_channels,
            "stem_channels": self.stem_channels,
            "stem_stride": self.stem_stride,
            "num_classes": self.num_classes,
            "blocks": [
                {
                    "expansion": b.expansion,
                    "in_ch": b.in_ch,
                    "out_ch": b.out_ch,
                    "stride": b.stride,
                    "has_lightnl_site": b.has_lightnl_site,
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            input_hw=tuple(doc["input_hw"]),
            input_channels=doc["input_channels"],
            stem_channels=doc["stem_channels"],
            stem_stride=doc["stem_stride"],
            num_classes=doc["num_classes"],
            blocks=tuple(
                BlockSpec(
                    expansion=b["expansion"],
                    in_ch=b["in_ch"],
                    out_ch=b["out_ch"],
                    stride=b["stride"],
                    has_lightnl_site=b["has_lightnl_site"],
                )
                for b in doc["blocks"]
            ),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def toy_spec(input_hw=(32, 32), input_channels=1, num_classes=10):
    """Default desk-scale backbone: 5 inverted-residual blocks, 8-64 channels."""
    return NetworkSpec(
        input_hw=tuple(input_hw),
        input_channels=input_channels,
        stem_channels=8,
        stem_stride=2,
        num_classes=num_classes,
        blocks=(
            BlockSpec(expansion=1, in_ch=8, out_ch=8, stride=1),
            BlockSpec(expansion=4, in_ch=8, out_ch=16, stride=2),
            BlockSpec(expansion=4, in_ch=16, out_ch=24, stride=1),
            BlockSpec(expansion=4, in_ch=24, out_ch=32, stride=2),
            BlockSpec(expansion=4, in_ch=32, out_ch=64, stride=1),
        ),
    )


def _ceil_div(a, b):
    return -(-a // b)


def site_shapes(nspec):
    """Feature shape (H, W, C) at each block output / candidate site."""
    h, w = nspec.input_hw
    s = nspec.stem_stride
    h = (h + 2 - 3) // s + 1
    w = (w + 2 - 3) // s + 1
    shapes = []
    for b in nspec.blocks:
        if b.stride > 1:
            h = _ceil_div(h, b.stride)
            w = _ceil_div(w, b.stride)
        shapes.append((h, w, b.out_ch))
    return shapes


@dataclass
class SearchSite:
    site_id: int
    wd: T.Tensor
    shape: tuple
    candidate_costs: list  # [ratio index][stride index] -> madds


class Network:
    """Backbone plus optional non-local machinery.

    mode: "plain", "lightnl" (manual configs), "realized" (from an
    ArchDescription) or "search" (gated supernet; forward needs a
    SearchState).
    """

    def __init__(self, nspec, mode="plain", seed=0, cset=None, arch=None,
                 lightnl_cfgs=None):
        if mode not in ("plain", "lightnl", "realized", "search"):
            raise SpecError(f"unknown network mode {mode!r}")
        self.nspec = nspec
        self.mode = mode
        self.cset = cset or nas_search.CandidateSet()
        rng = np.random.default_rng(seed)

        def conv_init(shape, fan_in):
            return T.Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in),
                            requires_grad=True)

        cin = nspec.input_channels
        self.stem_w = conv_init((3, 3, cin, nspec.stem_channels), 9 * cin)
        self.stem_bn = T.BatchNormState(nspec.stem_channels)
        self.blocks = []
        for b in nspec.blocks:
            mid = b.in_ch * b.expansion
            self.blocks.append({
                "spec": b,
                "expand_w": conv_init((b.in_ch, mid), b.in_ch),
                "bn1": T.BatchNormState(mid),
                "dw_w": conv_init((3, 3, mid), 9),
                "bn2": T.BatchNormState(mid),
                "project_w": conv_init((mid, b.out_ch), mid),
                "bn3": T.BatchNormState(b.out_ch),
                "site": None,
            })
        c_last = nspec.blocks[-1].out_ch if nspec.blocks else nspec.stem_channels
        self.head_w = conv_init((c_last, nspec.num_classes), c_last)
        self.head_b = T.Tensor(np.zeros(nspec.num_classes), requires_grad=True)

        # non-local machinery, created after all backbone weights
        shapes = site_shapes(nspec)
        self._shapes = shapes
        if mode == "lightnl":
            for i, blk in enumerate(self.blocks):
                if not blk["spec"].has_lightnl_site:
                    continue
                cfg = (lightnl_cfgs or {}).get(i) or cost.default_lightnl_cfg(shapes[i])
                wd = T.Tensor(np.zeros((3, 3, shapes[i][2])), requires_grad=True)
                blk["site"] = ("lightnl", blocks.LightNLParams(wd=wd), cfg)
        elif mode == "realized":
            if arch is None:
                raise SpecError("realized mode needs an ArchDescription")
            by_site = {l.site: l for l in arch.locations}
            for i, blk in enumerate(self.blocks):
                loc = by_site.get(i)
                if loc is None or not loc.insert:
                    continue
                if not blk["spec"].has_lightnl_site:
                    raise SpecError(f"architecture inserts at site {i}, "
                                    "which the backbone does not expose")
                cfg = blocks.NLConfig(channel_ratio=loc.channel_ratio,
                                      spatial_stride=loc.spatial_stride)
                wd = T.Tensor(np.zeros((3, 3, shapes[i][2])), requires_grad=True)
                blk["site"] = ("lightnl", blocks.LightNLParams(wd=wd), cfg)
        elif mode == "search":
            for i, blk in enumerate(self.blocks):
                if not blk["spec"].has_lightnl_site:
                    continue
                c = shapes[i][2]
                wd = T.Tensor(rng.standard_normal((3, 3, c)) * 0.5 / math.sqrt(9 * c),
                              requires_grad=True)
                costs = [
                    [
                        cost.flops_nl_variant(
                            cost.VARIANT_LIGHTNL, shapes[i],
                            blocks.NLConfig(channel_ratio=r, spatial_stride=s))
                        for s in self.cset.spatial_strides
                    ]
                    for r in self.cset.channel_ratios
                ]
                blk["site"] = ("search", SearchSite(site_id=i, wd=wd,
                                                    shape=shapes[i],
                                                    candidate_costs=costs))

    # -- parameter registry ------------------------------------------------

    def named_params(self):
        out = {"stem.w": self.stem_w}
        self._bn_params(out, "stem.bn", self.stem_bn)
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.expand_w"] = blk["expand_w"]
            self._bn_params(out, f"block{i}.bn1", blk["bn1"])
            out[f"block{i}.dw_w"] = blk["dw_w"]
            self._bn_params(out, f"block{i}.bn2", blk["bn2"])
            out[f"block{i}.project_w"] = blk["project_w"]
            self._bn_params(out, f"block{i}.bn3", blk["bn3"])
            if blk["site"] is not None:
                out[f"site{i}.wd"] = blk["site"][1].wd
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @staticmethod
    def _bn_params(out, prefix, bn):
        out[f"{prefix}.gamma"] = bn.gamma
        out[f"{prefix}.beta"] = bn.beta

    def weights(self):
        return list(self.named_params().values())

    def param_count(self):
        return sum(p.data.size for p in self.weights())

    def bn_states(self):
        states = {"stem.bn": self.stem_bn}
        for i, blk in enumerate(self.blocks):
            states[f"block{i}.bn1"] = blk["bn1"]
            states[f"block{i}.bn2"] = blk["bn2"]
            states[f"block{i}.bn3"] = blk["bn3"]
        return states

    def zero_grad(self):
        for p in self.weights():
            p.zero_grad()

    def search_sites(self):
        return [blk["site"][1] for blk in self.blocks
                if blk["site"] is not None and blk["site"][0] == "search"]

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_params().items()}
        for name, bn in self.bn_states().items():
            out[f"{name}.running_mean"] = bn.running_mean.copy()
            out[f"{name}.running_var"] = bn.running_var.copy()
        return out

    def load_state_dict(self, arrays):
        for name, p in self.named_params().items():
            p.data[...] = arrays[name]
        for name, bn in self.bn_states().items():
            bn.running_mean[...] = arrays[f"{name}.running_mean"]
            bn.running_var[...] = arrays[f"{name}.running_var"]

    # -- forward -----------------------------------------------------------

    def forward(self, images, mode="train", search_state=None):
        """images: (N, H, W, C) array in [0, 1]; returns logits tensor."""
        if self.mode == "search" and search_state is None:
            raise SpecError("search-mode forward needs a SearchState")
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        x = T.conv2d(x, self.stem_w, stride=self.nspec.stem_stride, pad=1)
        x = T.relu6(T.batchnorm(x, self.stem_bn, mode))
        for blk in self.blocks:
            x = self._block_forward(x, blk, mode, search_state)
        pooled = T.global_avg_pool(x)
        return T.linear(pooled, self.head_w, self.head_b)

    def _block_forward(self, x, blk, mode, search_state):
        spec = blk["spec"]
        h = T.conv1x1(x, blk["expand_w"])
        h = T.relu6(T.batchnorm(h, blk["bn1"], mode))
        h = T.depthwise_conv3x3(h, blk["dw_w"])
        if spec.stride > 1:
            h = T.spatial_subsample(h, spec.stride)
        h = T.relu6(T.batchnorm(h, blk["bn2"], mode))
        h = T.conv1x1(h, blk["project_w"])
        h = T.batchnorm(h, blk["bn3"], mode)
        if blk["site"] is not None:
            kind = blk["site"][0]
            if kind == "lightnl":
                _, params, cfg = blk["site"]
                h = blocks.lightnl_block(h, params, cfg)
            else:
                h = self._search_site_forward(h, blk["site"][1], search_state, mode)
        if spec.residual:
            h = T.add(h, x)
        return h

    def _search_site_forward(self, x, site, state, mode):
        """Gated non-local site: hard decisions forward, relaxed backward."""
        n, hh, ww, c = x.shape
        cset = state.cset
        loc = state.locations[site.site_id]
        strides = cset.spatial_strides

        affs_by_stride = []
        xs_by_stride = []
        ps_by_stride = []
        for s in strides:
            affs_by_stride.append(nas_search.affinity_with_reuse(x, cset, s))
            ps = _ceil_div(hh, s) * _ceil_div(ww, s)
            xs_by_stride.append(T.reshape(T.spatial_subsample(x, s), (n, ps, c)))
            ps_by_stride.append(ps)

        # candidate outputs y[i][j] for ratio i, stride j, each (N, P, C)
        y = [[T.scale(T.matmul(affs_by_stride[j][i], xs_by_stride[j]),
                      1.0 / ps_by_stride[j])
              for j in range(len(strides))]
             for i in range(len(cset.channel_ratios))]

        # distances: channel chain at the densest stride, spatial chain at
        # the densest ratio (output-level, so shapes agree across strides)
        dense_affs = affs_by_stride[-1]
        ch_dists = [nas_search.distance(a, dense_affs[-1]) for a in dense_affs]
        sp_dists = [nas_search.distance(y[-1][j], y[-1][-1])
                    for j in range(len(strides))]
        update = mode == "train"
        if update and state.ema_before_select:
            nas_search.update_location_emas(loc, ch_dists, sp_dists, state.mu)
        ch_reg = loc.channel_distances() if loc.ema_channel is not None else ch_dists
        sp_reg = loc.spatial_distances() if loc.ema_spatial is not None else sp_dists
        ci = nas_search.select_ratio(ch_reg, loc.t_channel)
        sj = nas_search.select_ratio(sp_reg, loc.t_spatial)
        if update and not state.ema_before_select:
            nas_search.update_location_emas(loc, ch_dists, sp_dists, state.mu)

        # hard value recomputed along the deployment code path so that a
        # realized network with the same decisions is bit-identical
        cfg = blocks.NLConfig(channel_ratio=cset.channel_ratios[ci],
                              spatial_stride=strides[sj])
        hard = blocks.nl_compact(T.Tensor(x.data), cfg)

        pc = cost.relaxed_select_probs(loc.t_channel, ch_reg, state.tau)
        ps_probs = cost.relaxed_select_probs(loc.t_spatial, sp_reg, state.tau)
        relaxed = None
        for i, pci in enumerate(pc):
            for j, psj in enumerate(ps_probs):
                term = T.scale_by(y[i][j], T.mul(pci, psj))
                relaxed = term if relaxed is None else T.add(relaxed, term)
        y_site = T.reshape(
            T.straight_through(hard.data.reshape(n, hh * ww, c), relaxed),
            (n, hh, ww, c))
        gated_wd, _ = nas_search.gate_insert(site.wd, loc.t_insert, state.tau)
        return T.add(T.depthwise_conv3x3(y_site, gated_wd), x)

    # -- analytic cost -----------------------------------------------------

    def backbone_madds(self):
        return backbone_flops_report(self.nspec).total

    def flops_report(self):
        """Per-op analytic report for the network as built (plain/lightnl/realized)."""
        report = backbone_flops_report(self.nspec)
        for i, blk in enumerate(self.blocks):
            if blk["site"] is not None and blk["site"][0] == "lightnl":
                cfg = blk["site"][2]
                report.add(f"site{i}", "lightnl",
                           cost.flops_nl_variant(cost.VARIANT_LIGHTNL,
                                                 self._shapes[i], cfg))
        return report


def backbone_flops_report(nspec):
    """Analytic multiply-adds of the backbone, matching the runtime counter."""
    report = cost.FlopsReport()
    h, w = nspec.input_hw
    s = nspec.stem_stride
    ho = (h + 2 - 3) // s + 1
    wo = (w + 2 - 3) // s + 1
    report.add("stem", "conv2d",
               cost.flops_conv2d(h, w, 3, 3, nspec.input_channels,
                                 nspec.stem_channels, stride=s, pad=1))
    h, w = ho, wo
    for i, b in enumerate(nspec.blocks):
        mid = b.in_ch * b.expansion
        report.add(f"block{i}", "expand_conv1x1", cost.flops_conv1x1(h, w, b.in_ch, mid))
        report.add(f"block{i}", "dwconv3x3", cost.flops_dwconv3x3(h, w, mid))
        if b.stride > 1:
            h = _ceil_div(h, b.stride)
            w = _ceil_div(w, b.stride)
        report.add(f"block{i}", "project_conv1x1", cost.flops_conv1x1(h, w, mid, b.out_ch))
    c_last = nspec.blocks[-1].out_ch if nspec.blocks else nspec.stem_channels
    report.add("head", "linear", c_last * nspec.num_classes)
    return report


def network_flops_report(nspec, arch=None):
    """Analytic report for a backbone plus the inserts of an ArchDescription."""
    report = backbone_flops_report(nspec)
    if arch is not None:
        shapes = site_shapes(nspec)
        for loc in arch.inserted():
            cfg = blocks.NLConfig(channel_ratio=loc.channel_ratio,
                                  spatial_stride=loc.spatial_stride)
            report.add(f"site{loc.site}", "lightnl",
                       cost.flops_nl_variant(cost.VARIANT_LIGHTNL,
                                             shapes[loc.site], cfg))
    return report


def realize(nspec, arch, seed=0):
    """Fixed network with non-local blocks exactly at the derived sites."""
    return Network(nspec, mode="realized", seed=seed, arch=arch)
