"""Backbone/supernet: shapes, mode degeneracies, cost exactness, checkpoints."""

import numpy as np
import pytest

import lightnl.cost as C
import lightnl.nas_search as S
import lightnl.supernet as N
import lightnl.tensor as T


def _toy(input_hw=(16, 16)):
    return N.toy_spec(input_hw=input_hw)


def _batch(rng, nspec, n=2):
    h, w = nspec.input_hw
    return rng.uniform(0.0, 1.0, (n, h, w, nspec.input_channels))


# -- spec validation / shapes ---------------------------------------------------

def test_spec_rejects_broken_channel_chain():
    with pytest.raises(N.SpecError):
        N.NetworkSpec(blocks=(N.BlockSpec(expansion=1, in_ch=8, out_ch=8),
                              N.BlockSpec(expansion=1, in_ch=16, out_ch=16)))


def test_spec_json_round_trip():
    nspec = _toy()
    assert N.NetworkSpec.from_json(nspec.to_json()).to_json() == nspec.to_json()


def test_logits_shape(rng):
    nspec = N.toy_spec(input_hw=(32, 32))
    net = N.Network(nspec, mode="plain", seed=0)
    logits = net.forward(_batch(rng, nspec, 3), mode="eval")
    assert logits.shape == (3, 10)


def test_site_shapes_toy_16():
    shapes = N.site_shapes(_toy((16, 16)))
    assert shapes == [(8, 8, 8), (4, 4, 16), (4, 4, 24), (2, 2, 32), (2, 2, 64)]


def test_block_output_shape_follows_stride(rng):
    nspec = _toy((16, 16))
    net = N.Network(nspec, mode="plain", seed=0)
    x = T.Tensor(_batch(rng, nspec))
    x = T.conv2d(x, net.stem_w, stride=2, pad=1)
    x = T.relu6(T.batchnorm(x, net.stem_bn, "eval"))
    for blk, (h, w, c) in zip(net.blocks, N.site_shapes(nspec)):
        x = net._block_forward(x, blk, "eval", None)
        assert x.shape == (2, h, w, c)


def test_param_count_matches_hand_count():
    nspec = _toy((16, 16))
    net = N.Network(nspec, mode="plain", seed=0)
    total = 3 * 3 * 1 * 8 + 2 * 8  # stem conv + bn gamma/beta
    for b in nspec.blocks:
        mid = b.in_ch * b.expansion
        total += b.in_ch * mid + 2 * mid       # expand + bn1
        total += 3 * 3 * mid + 2 * mid         # dwconv + bn2
        total += mid * b.out_ch + 2 * b.out_ch  # project + bn3
    total += 64 * 10 + 10  # head
    assert net.param_count() == total


# -- mode degeneracies --------------------------------------------------------------

def test_lightnl_mode_zero_kernels_equals_plain(rng):
    nspec = _toy()
    x = _batch(rng, nspec)
    plain = N.Network(nspec, mode="plain", seed=3).forward(x, mode="eval")
    manual = N.Network(nspec, mode="lightnl", seed=3).forward(x, mode="eval")
    assert np.array_equal(plain.data, manual.data)


def test_realized_all_off_equals_plain(rng):
    nspec = _toy()
    arch = S.ArchDescription(
        locations=[S.ArchLocation(site=i, insert=False) for i in range(5)])
    x = _batch(rng, nspec)
    plain = N.Network(nspec, mode="plain", seed=5).forward(x, mode="eval")
    realized = N.realize(nspec, arch, seed=5).forward(x, mode="eval")
    assert np.array_equal(plain.data, realized.data)


def test_search_gates_hard_off_equals_plain(rng):
    nspec = _toy()
    net = N.Network(nspec, mode="search", seed=7)
    state = S.init_search_state(net.search_sites())
    for loc in state.locations.values():
        loc.t_insert.data[...] = 1e9  # every gate hard-off
    x = _batch(rng, nspec)
    with T.no_grad():
        searched = net.forward(x, mode="eval", search_state=state)
    plain = N.Network(nspec, mode="plain", seed=7).forward(x, mode="eval")
    assert np.array_equal(searched.data, plain.data)


def test_search_and_realized_bit_identical_with_same_decisions(rng):
    nspec = _toy()
    net = N.Network(nspec, mode="search", seed=11)
    state = S.init_search_state(net.search_sites())
    x = _batch(rng, nspec)
    with T.no_grad():
        net.forward(x, mode="train", search_state=state)  # populate EMAs
        searched = net.forward(x, mode="eval", search_state=state)
    arch = S.derive_architecture(state, backbone=nspec.to_dict())
    realized = N.realize(nspec, arch, seed=11)
    realized.load_state_dict(net.state_dict())
    for loc in arch.inserted():
        realized.blocks[loc.site]["site"][1].wd.data[...] = \
            net.blocks[loc.site]["site"][1].wd.data
    with T.no_grad():
        fixed = realized.forward(x, mode="eval")
    assert np.array_equal(searched.data, fixed.data)


def test_realized_rejects_insert_at_missing_site():
    nspec = N.NetworkSpec(blocks=(
        N.BlockSpec(expansion=1, in_ch=8, out_ch=8, has_lightnl_site=False),))
    arch = S.ArchDescription(locations=[
        S.ArchLocation(site=0, insert=True, channel_ratio=0.25, spatial_stride=1)])
    with pytest.raises(N.SpecError):
        N.Network(nspec, mode="realized", seed=0, arch=arch)


def test_one_insert_adds_exactly_one_wd_group():
    nspec = _toy()
    arch = S.ArchDescription(locations=[
        S.ArchLocation(site=i, insert=(i == 3),
                       channel_ratio=0.25 if i == 3 else None,
                       spatial_stride=1 if i == 3 else None)
        for i in range(5)])
    plain = N.Network(nspec, mode="plain", seed=0)
    realized = N.realize(nspec, arch, seed=0)
    extra = set(realized.named_params()) - set(plain.named_params())
    assert extra == {"site3.wd"}


# -- analytic cost vs runtime counter ---------------------------------------------------

def test_backbone_report_matches_runtime_counter(rng):
    nspec = _toy((16, 16))
    net = N.Network(nspec, mode="plain", seed=0)
    with T.no_grad(), T.count_madds() as ctr:
        net.forward(_batch(rng, nspec, 1), mode="eval")
    assert ctr.total == net.backbone_madds()


def test_realized_report_matches_runtime_counter(rng):
    nspec = _toy((16, 16))
    arch = S.ArchDescription(locations=[
        S.ArchLocation(site=i, insert=True, channel_ratio=0.25,
                       spatial_stride=2 if i < 2 else 1)
        for i in range(5)])
    net = N.realize(nspec, arch, seed=0)
    with T.no_grad(), T.count_madds() as ctr:
        net.forward(_batch(rng, nspec, 1), mode="eval")
    assert ctr.total == net.flops_report().total
    assert net.flops_report().total == N.network_flops_report(nspec, arch).total


def test_flops_report_total_is_sum_of_entries():
    report = N.Network(_toy(), mode="lightnl", seed=0).flops_report()
    assert report.total == sum(m for _, _, m in report.entries)


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip_preserves_eval(tmp_path, rng):
    from lightnl import train as TR
    nspec = _toy()
    net = N.Network(nspec, mode="plain", seed=1)
    x = _batch(rng, nspec, 4)
    before = net.forward(x, mode="eval").data.copy()
    path = str(tmp_path / "m.ckpt")
    TR.save_checkpoint(net, path)
    other = N.Network(nspec, mode="plain", seed=99)
    TR.load_checkpoint(other, path)
    after = other.forward(x, mode="eval").data
    assert np.array_equal(before, after)
