"""Differentiable search over non-local insert locations and compactness.

Insertion is gated by comparing the squared L2 norm of each depthwise
kernel against a trainable threshold; channel ratio and spatial stride are
selected by threshold chains over exponentially-averaged affinity
distances. All forward decisions are hard; gradients reach the thresholds
through sigmoid relaxations of the indicator comparisons.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import cost
from . import tensor as T


class ConfigError(ValueError):
    pass


class DerivationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    """Channel ratios ascending; spatial strides descending (most compact first).

    The densest candidate (largest ratio, stride 1) is the ground truth the
    cheaper candidates are measured against, so its distance is zero by
    construction and selection always succeeds.
    """

    channel_ratios: tuple = (0.125, 0.25)
    spatial_strides: tuple = (2, 1)

    def __post_init__(self):
        if list(self.channel_ratios) != sorted(set(self.channel_ratios)):
            raise ConfigError(f"channel ratios must be strictly ascending: {self.channel_ratios}")
        if any(not 0 < r <= 1 for r in self.channel_ratios):
            raise ConfigError(f"channel ratios must lie in (0, 1]: {self.channel_ratios}")
        strides = list(self.spatial_strides)
        if strides != sorted(set(strides), reverse=True) or strides[-1] < 1:
            raise ConfigError(f"spatial strides must be strictly descending and >= 1: {strides}")

    def to_dict(self):
        return {
            "channel_ratios": list(self.channel_ratios),
            "spatial_strides": list(self.spatial_strides),
        }


@dataclass
class LocationState:
    """Trainable thresholds and EMA registers for one candidate location."""

    site_id: int
    wd: T.Tensor
    t_insert: T.Tensor
    t_channel: T.Tensor
    t_spatial: T.Tensor
    ema_channel: np.ndarray = None
    ema_spatial: np.ndarray = None
    n_channel: int = 1
    n_spatial: int = 1

    def thresholds(self):
        return [self.t_insert, self.t_channel, self.t_spatial]

    def channel_distances(self):
        if self.ema_channel is None:
            return [0.0] * self.n_channel
        return list(self.ema_channel)

    def spatial_distances(self):
        if self.ema_spatial is None:
            return [0.0] * self.n_spatial
        return list(self.ema_spatial)


@dataclass
class SearchState:
    locations: dict = field(default_factory=dict)  # site_id -> LocationState
    cset: CandidateSet = field(default_factory=CandidateSet)
    tau: float = 1.0
    mu: float = 0.99
    lam: float = 0.0
    ema_before_select: bool = True

    def thresholds(self):
        out = []
        for sid in sorted(self.locations):
            out.extend(self.locations[sid].thresholds())
        return out

    def zero_grad(self):
        for t in self.thresholds():
            t.zero_grad()


def init_search_state(sites, cset=None, tau=1.0, mu=0.99, lam=0.0):
    """Create thresholds for the given search sites (objects with site_id and wd).

    t_insert starts at half the mean kernel norm so every gate is initially
    open; the distance thresholds start at zero and move with the data.
    """
    cset = cset or CandidateSet()
    norms = [float(np.sum(s.wd.data ** 2)) for s in sites]
    t0 = 0.5 * (sum(norms) / len(norms)) if norms else 0.0
    state = SearchState(cset=cset, tau=tau, mu=mu, lam=lam)
    nch = len(cset.channel_ratios)
    nsp = len(cset.spatial_strides)
    for s in sites:
        loc = LocationState(
            site_id=s.site_id,
            wd=s.wd,
            t_insert=T.Tensor(t0, requires_grad=True),
            t_channel=T.Tensor(0.0, requires_grad=True),
            t_spatial=T.Tensor(0.0, requires_grad=True),
            n_channel=nch,
            n_spatial=nsp,
        )
        state.locations[s.site_id] = loc
    return state


# ---------------------------------------------------------------------------
# primitive search operations

def gate_insert(wd, t_insert, tau):
    """Hard kernel-norm gate with a sigmoid-relaxed backward.

    Forward: gated = wd if ||wd||^2 > t else 0. Backward differentiates the
    relaxed form sigma((||wd||^2 - t)/tau) * wd with respect to wd and t.
    Returns (gated kernel tensor, hard gate value).
    """
    nsq = float(np.sum(wd.data ** 2))
    t = float(t_insert.data)
    hard = 1.0 if nsq > t else 0.0
    z = (nsq - t) / tau
    if z >= 0:
        sig = 1.0 / (1.0 + math.exp(-z))
    else:
        ez = math.exp(z)
        sig = ez / (1.0 + ez)

    def bw(dy):
        inner = float(np.sum(dy * wd.data))
        if wd.requires_grad:
            T._accumulate(wd, dy * sig + inner * sig * (1 - sig) / tau * 2 * wd.data)
        if t_insert.requires_grad:
            T._accumulate(t_insert, np.asarray(-inner * sig * (1 - sig) / tau))

    return T._result(wd.data * hard, (wd, t_insert), bw), hard


def distance(a, b):
    """Squared Frobenius distance divided by entry count."""
    a = a.data if isinstance(a, T.Tensor) else np.asarray(a)
    b = b.data if isinstance(b, T.Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"distance shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ema_update(register, value, mu):
    """register <- mu*register + (1-mu)*value; first call initializes."""
    if register is None:
        return float(value)
    return mu * float(register) + (1 - mu) * float(value)


def select_ratio(distances, t):
    """Smallest index whose distance is below t; falls through to the last."""
    t = float(t.data) if isinstance(t, T.Tensor) else float(t)
    for i, d in enumerate(distances):
        if d < t:
            return i
    return len(distances) - 1


def hard_select_indicators(distances, t):
    """One-hot indicator chain; exactly one entry fires for any (d, t)."""
    idx = select_ratio(distances, t)
    return [1 if i == idx else 0 for i in range(len(distances))]


def affinity_with_reuse(x, cset, stride):
    """All candidate affinity matrices, computed incrementally.

    x is an NHWC feature map; for each candidate ratio r the affinity is
    x_c x_sc^T over the channel prefix of size floor(r*C). Nested prefixes
    let each affinity extend the previous one by a rank-(delta C) update,
    so the whole list costs exactly as many multiply-adds as the densest
    product alone.
    """
    n, h, w, c = x.shape
    keeps = [int(np.floor(r * c)) for r in cset.channel_ratios]
    if keeps != sorted(set(keeps)) or keeps[0] < 1:
        raise ConfigError(
            f"candidate ratios {cset.channel_ratios} do not give nested non-empty "
            f"prefixes on C={c} (prefix sizes {keeps})")
    xs_map = T.spatial_subsample(x, stride)
    p = h * w
    ps = math.ceil(h / stride) * math.ceil(w / stride)
    out = []
    acc = None
    prev = 0
    for k in keeps:
        dc = T.reshape(T.slice_last_axis(x, prev, k), (n, p, k - prev))
        dsc = T.reshape(T.slice_last_axis(xs_map, prev, k), (n, ps, k - prev))
        term = T.matmul(dc, T.transpose_2d(dsc))
        acc = term if acc is None else T.add(acc, term)
        out.append(acc)
        prev = k
    return out


def gated_affinity(x, cset, state, site_id, stride=1, update_ema=True):
    """Hard-select one candidate affinity; relax the chain in the backward pass.

    Returns (x_att, selected index). EMA registers of the location are
    refreshed with this batch's distances before selection (configurable
    via state.ema_before_select).
    """
    loc = state.locations[site_id]
    affs = affinity_with_reuse(x, cset, stride)
    gt = affs[-1]
    dists = [distance(a, gt) for a in affs]
    if update_ema and loc.ema_channel is None:
        loc.t_channel.data[...] = 0.5 * (min(dists) + max(dists))
    if update_ema and state.ema_before_select:
        loc.ema_channel = _ema_vec(loc.ema_channel, dists, state.mu)
    registers = list(loc.ema_channel) if loc.ema_channel is not None else dists
    idx = select_ratio(registers, loc.t_channel)
    probs = cost.relaxed_select_probs(loc.t_channel, registers, state.tau)
    relaxed = None
    for p_i, a_i in zip(probs, affs):
        term = T.scale_by(a_i, p_i)
        relaxed = term if relaxed is None else T.add(relaxed, term)
    x_att = T.straight_through(affs[idx].data, relaxed)
    if update_ema and not state.ema_before_select:
        loc.ema_channel = _ema_vec(loc.ema_channel, dists, state.mu)
    return x_att, idx


def _ema_vec(register, values, mu):
    values = np.asarray(values, dtype=np.float64)
    if register is None:
        return values.copy()
    return mu * np.asarray(register) + (1 - mu) * values


def update_location_emas(loc, channel_dists, spatial_dists, mu):
    # distance thresholds start at the midpoint of the first observed range
    if loc.ema_channel is None:
        loc.t_channel.data[...] = 0.5 * (min(channel_dists) + max(channel_dists))
    if loc.ema_spatial is None:
        loc.t_spatial.data[...] = 0.5 * (min(spatial_dists) + max(spatial_dists))
    loc.ema_channel = _ema_vec(loc.ema_channel, channel_dists, mu)
    loc.ema_spatial = _ema_vec(loc.ema_spatial, spatial_dists, mu)


# ---------------------------------------------------------------------------
# derived architectures

@dataclass
class ArchLocation:
    site: int
    insert: bool
    channel_ratio: float = None
    spatial_stride: int = None


@dataclass
class ArchDescription:
    locations: list
    backbone: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    SCHEMA = 1

    def to_json(self):
        doc = {
            "schema": self.SCHEMA,
            "locations": [
                {
                    "site": l.site,
                    "insert": l.insert,
                    "channel_ratio": l.channel_ratio,
                    "spatial_stride": l.spatial_stride,
                }
                for l in self.locations
            ],
            "backbone": self.backbone,
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != cls.SCHEMA:
            raise ConfigError(f"unsupported architecture schema: {doc.get('schema')!r}")
        locs = [
            ArchLocation(
                site=int(l["site"]),
                insert=bool(l["insert"]),
                channel_ratio=l.get("channel_ratio"),
                spatial_stride=l.get("spatial_stride"),
            )
            for l in doc["locations"]
        ]
        return cls(locations=locs, backbone=doc.get("backbone", {}),
                   meta=doc.get("meta", {}))

    def inserted(self):
        return [l for l in self.locations if l.insert]


def derive_architecture(state, cset=None, backbone=None, meta=None):
    """Discrete architecture from kernel norms, thresholds and EMA registers."""
    cset = cset or state.cset
    locs = []
    for sid in sorted(state.locations):
        loc = state.locations[sid]
        nsq = float(np.sum(loc.wd.data ** 2))
        insert = nsq > float(loc.t_insert.data)
        if not insert:
            locs.append(ArchLocation(site=sid, insert=False))
            continue
        if loc.ema_channel is None or loc.ema_spatial is None:
            raise DerivationError(
                f"site {sid}: EMA registers not populated; run the search first")
        ci = select_ratio(list(loc.ema_channel), loc.t_channel)
        si = select_ratio(list(loc.ema_spatial), loc.t_spatial)
        locs.append(ArchLocation(
            site=sid,
            insert=True,
            channel_ratio=cset.channel_ratios[ci],
            spatial_stride=cset.spatial_strides[si],
        ))
    return ArchDescription(locations=locs, backbone=backbone or {}, meta=meta or {})


class DivergenceError(RuntimeError):
    pass


def search_step(supernet, batch, state, optimizer):
    """One search iteration: hard-gated forward, relaxed backward, update.

    Returns the cross-entropy, expected cost and combined loss for logging.
    """
    images, labels = batch
    supernet.zero_grad()
    state.zero_grad()
    logits = supernet.forward(images, mode="train", search_state=state)
    ce = T.softmax_cross_entropy(logits, labels)
    cc = cost.expected_cost(state, supernet)
    loss = T.add(ce, T.scale(T.log(cc), state.lam))
    if not np.isfinite(loss.data):
        raise DivergenceError(
            f"non-finite loss: ce={float(ce.data)!r} expected_cost={float(cc.data)!r}")
    T.backward(loss)
    optimizer.step()
    return {
        "ce": float(ce.data),
        "expected_cost": float(cc.data),
        "loss": float(loss.data),
        "logits": logits.data,
    }
