"""Bundled applications: identity forwarder, packet sampler, stateful
firewall.

An application is the six pipeline component functions plus the engine
configuration they assume (multicast groups, generator timing,
admission policy) and the initial per-component state.  Everything is
collected in an AppBundle so a switch can be instantiated in one call.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .engines import L1Node, McConfig, PktGenConfig, PktGenState, QacMinimal
from .headers import (
    ETHERNET, INTRINSIC_META, IPV4, PORT_META, SAMPLE_HEADER, SAMPLE_MARKER,
    TCP, UDP, IP_PROTO_TCP, IP_PROTO_UDP,
    build_packet, make_ethernet, make_intrinsic_meta, make_ipv4, make_sample,
)
from .packet_format import (
    EMPTY_BITS, BitString, ExtractStatus, TypedValue, encode, extract,
)
from .pipeline import Components, EgressIndication, MirrorId, ParsedData, TmMeta

# ethertype of the generator keepalive template; disjoint from the
# sample marker and from anything a host would send in these tests
KEEPALIVE_ETHERTYPE = 0x9A9A

# wire order of header slots when a pipeline reassembles a packet
SLOT_ORDER = ("sample", "meta", "port_md", "ethernet", "ipv4", "tcp", "udp")


@dataclass(frozen=True)
class AppBundle:
    name: str
    components: Components
    mc: McConfig
    pktgen: PktGenConfig
    qac: object
    init_ingress: tuple
    init_egress: tuple


def initial_switch_state(bundle: AppBundle):
    from .switch import SwitchState
    return SwitchState(t=0, s_g=PktGenState(),
                       s_i=bundle.init_ingress, s_e=bundle.init_egress)


def switch_config(bundle: AppBundle):
    from .switch import SwitchConfig
    return SwitchConfig(components=bundle.components, mc=bundle.mc,
                        pktgen=bundle.pktgen, qac=bundle.qac,
                        app_label=bundle.name)


# ---------------------------------------------------------------------------
# shared parsing and deparsing


def parse_standard(p: BitString) -> Optional[ParsedData]:
    """Split a wire packet along the standard layout.

    Returns None when the input is too short for the headers its own
    protocol field promises; trailing bits become the payload.
    """
    slots: dict[str, TypedValue] = {}
    rest = p
    for name, htype in (("meta", INTRINSIC_META), ("port_md", PORT_META),
                        ("ethernet", ETHERNET), ("ipv4", IPV4)):
        v, status, rest = extract(htype, rest)
        if status is ExtractStatus.FAILURE:
            return None
        slots[name] = v
    proto = slots["ipv4"]["protocol"]
    if proto == IP_PROTO_TCP:
        v, status, rest = extract(TCP, rest)
        if status is ExtractStatus.FAILURE:
            return None
        slots["tcp"] = v
    elif proto == IP_PROTO_UDP:
        v, status, rest = extract(UDP, rest)
        if status is ExtractStatus.FAILURE:
            return None
        slots["udp"] = v
    return ParsedData(slots, rest)


def parse_sampled(p: BitString) -> Optional[ParsedData]:
    """Like parse_standard but expecting a sample record up front."""
    v, status, rest = extract(SAMPLE_HEADER, p)
    if status is ExtractStatus.FAILURE:
        return None
    inner = parse_standard(rest)
    if inner is None:
        return None
    return ParsedData({"sample": v, **inner.slots}, inner.payload)


def deparse_slots(slots: dict[str, TypedValue]) -> BitString:
    out = EMPTY_BITS
    for name in SLOT_ORDER:
        if name in slots:
            out = out + encode(slots[name])
    return out


def _tm(*, ucast: Optional[int] = None, mcast_a: int = 0,
        drop: int = 0, rid: int = 0) -> TmMeta:
    return TmMeta(ucast_egress_port=ucast, copy_to_cpu=0, mcast_grp_a=mcast_a,
                  mcast_grp_b=0, level1_exclusion_id=0, level2_exclusion_id=0,
                  rid=rid, bypass_egress=0, drop=drop)


# ---------------------------------------------------------------------------
# identity forwarder


def identity_app(forward_port: int = 1, *, mc: Optional[McConfig] = None,
                 pktgen: Optional[PktGenConfig] = None,
                 qac=None) -> AppBundle:
    """Sends every parseable packet, unchanged, out one port."""

    def in_parser(p, s):
        return parse_standard(p), s

    def in_control(d, s):
        t, in_port, slots = d
        return (_tm(ucast=forward_port), MirrorId(), slots), s

    def in_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    def e_parser(d, s):
        em, p = d
        return parse_standard(p), s

    def e_control(d, s):
        em, slots = d
        return slots, s

    def e_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    comps = Components(in_parser, in_control, in_deparser,
                       e_parser, e_control, e_deparser)
    return AppBundle(name="identity", components=comps,
                     mc=mc if mc is not None else McConfig(),
                     pktgen=pktgen if pktgen is not None else PktGenConfig(),
                     qac=qac if qac is not None else QacMinimal(),
                     init_ingress=(None, None, None), init_egress=(None, None, None))


# ---------------------------------------------------------------------------
# packet sampler


@dataclass(frozen=True)
class SamplerConfig:
    forward_port: int = 1
    monitor_port: int = 3
    monitor_group: int = 100
    sample_every: int = 1024
    forward_rid: int = 2
    monitor_rid: int = 1

    def __post_init__(self) -> None:
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.forward_rid == self.monitor_rid:
            raise ValueError("forward and monitor copies need distinct rids")


@dataclass(frozen=True)
class SamplerState:
    counter: int = 0  # packets seen so far, mod 2^32


def sampler_app(cfg: SamplerConfig = SamplerConfig(), *,
                pktgen: Optional[PktGenConfig] = None, qac=None) -> AppBundle:
    """Every sample_every-th packet is multicast as two copies: one to
    the monitor with a sample record in front, one to the normal
    forward port with the original bytes restored on egress.  All
    other packets are plain unicast forwards."""

    def in_parser(p, s):
        return parse_standard(p), s

    def in_control(d, s):
        t, in_port, slots = d
        c2 = (s.counter + 1) % (1 << 32)
        if c2 % cfg.sample_every == 0:
            ipv4 = slots["ipv4"]
            l4 = slots.get("tcp") or slots.get("udp")
            sample = make_sample(
                src_addr=ipv4["src"], dst_addr=ipv4["dst"],
                src_port=l4["src_port"] if l4 is not None else 0,
                dst_port=l4["dst_port"] if l4 is not None else 0,
                sample_count=c2)
            out = (_tm(mcast_a=cfg.monitor_group), MirrorId(),
                   {"sample": sample, **slots})
        else:
            out = (_tm(ucast=cfg.forward_port), MirrorId(), slots)
        return out, SamplerState(c2)

    def in_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    def e_parser(d, s):
        em, p = d
        # sampled copies lead with the marker; ordinary packets lead
        # with a port number < 512, so a 16-bit peek disambiguates
        if p.nbits >= 16 and p.take(16).value == SAMPLE_MARKER:
            return parse_sampled(p), s
        return parse_standard(p), s

    def e_control(d, s):
        em, slots = d
        if "sample" not in slots:
            return slots, s
        if em.rid == cfg.monitor_rid:
            return {"sample": slots["sample"]}, s
        return {k: v for k, v in slots.items() if k != "sample"}, s

    def e_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    # forward node first: FIFO drains then emit the restored original
    # before the monitor record, which is the order the relation expects
    mc = McConfig(groups={cfg.monitor_group: (
        L1Node(dev_port_list=(cfg.forward_port,), rid=cfg.forward_rid),
        L1Node(dev_port_list=(cfg.monitor_port,), rid=cfg.monitor_rid),
    )})
    comps = Components(in_parser, in_control, in_deparser,
                       e_parser, e_control, e_deparser)
    return AppBundle(name="sampler", components=comps, mc=mc,
                     pktgen=pktgen if pktgen is not None else PktGenConfig(),
                     qac=qac if qac is not None else QacMinimal(),
                     init_ingress=(None, SamplerState(), None),
                     init_egress=(None, None, None))


# ---------------------------------------------------------------------------
# stateful firewall


@dataclass(frozen=True)
class FirewallConfig:
    inside_port: int = 1
    outside_port: int = 2
    window: int = 256        # ticks a flow stays admitted after its last insert
    bits: int = 512          # filter bits per pane
    hash_count: int = 3
    hash_seed: int = 0x5EED
    keepalive_period: int = 16

    def __post_init__(self) -> None:
        if self.window < 1 or self.bits < 1 or self.hash_count < 1:
            raise ValueError("window, bits and hash_count must all be >= 1")
        if self.inside_port == self.outside_port:
            raise ValueError("inside and outside must be distinct ports")


@dataclass(frozen=True)
class FirewallState:
    """Two filter panes aged against the clock.

    Inserts set bits in both panes; lookups consult their union.  Only
    the inactive pane is ever cleaned, one slice of bits per tick, so
    that by the time it becomes active again it is empty.  A flow
    inserted at tick t therefore stays visible in the union at least
    until t + window: the pane that is active (or about to become
    active) at insert time is not touched by the cleaner for a full
    window after the next rotation.
    """

    pane0: int = 0
    pane1: int = 0
    active: int = 0      # pane currently exempt from cleaning
    rotated_at: int = 0  # tick of the last pane swap
    cursor: int = 0      # first uncleaned bit of the inactive pane


def _hash_params(seed: int, k: int) -> tuple[tuple[int, int], ...]:
    rng = random.Random(seed)
    return tuple((rng.getrandbits(64) | 1, rng.getrandbits(64)) for _ in range(k))


def flow_key(slots: dict[str, TypedValue], inbound: bool) -> Optional[int]:
    """Canonical bidirectional 5-tuple fingerprint, oriented as seen
    from the outside.  None for non-TCP/UDP traffic."""
    ipv4 = slots["ipv4"]
    l4 = slots.get("tcp") or slots.get("udp")
    if l4 is None:
        return None
    src, dst = ipv4["src"], ipv4["dst"]
    sp, dp = l4["src_port"], l4["dst_port"]
    if not inbound:
        src, dst, sp, dp = dst, src, dp, sp
    return (src << 80) | (dst << 48) | (sp << 32) | (dp << 16) | ipv4["protocol"]


def keepalive_template(cfg: FirewallConfig) -> BitString:
    return build_packet(
        meta=make_intrinsic_meta(ingress_port=68),
        ethernet=make_ethernet(ethertype=KEEPALIVE_ETHERTYPE),
        ipv4=make_ipv4(protocol=0xFF))


def firewall_app(cfg: FirewallConfig = FirewallConfig(), *, qac=None) -> AppBundle:
    """Allow-by-default from the inside, allow-by-history from the
    outside.

    Outbound packets record their flow in the filter; inbound packets
    are forwarded only when the filter remembers the flow, otherwise
    dropped.  Generator keepalives guarantee the aging logic runs at
    least every keepalive_period ticks even with no traffic; they are
    consumed without producing output.
    """
    params = _hash_params(cfg.hash_seed, cfg.hash_count)
    m = cfg.bits
    mask = (1 << 64) - 1

    def positions(key: int) -> list[int]:
        # the affine step alone is useless here: key bits below 16 are
        # constant per protocol and "% m" with a power-of-two m reads
        # only low bits, so fold the high bits down first
        out = []
        for a, b in params:
            h = (a * key + b) & mask
            h ^= h >> 30
            h = (h * 0xBF58476D1CE4E5B9) & mask
            h ^= h >> 27
            h = (h * 0x94D049BB133111EB) & mask
            h ^= h >> 31
            out.append(h % m)
        return out

    def pane(s: FirewallState, which: int) -> int:
        return s.pane0 if which == 0 else s.pane1

    def with_pane(s: FirewallState, which: int, value: int) -> FirewallState:
        if which == 0:
            return FirewallState(value, s.pane1, s.active, s.rotated_at, s.cursor)
        return FirewallState(s.pane0, value, s.active, s.rotated_at, s.cursor)

    def maintain(t: int, s: FirewallState) -> FirewallState:
        # swap panes once a full window has elapsed; the rest of the
        # inactive pane is wiped here so the new active pane is clean
        if t - s.rotated_at >= cfg.window:
            inactive = 1 - s.active
            wipe = ((1 << m) - (1 << s.cursor)) if s.cursor < m else 0
            s = with_pane(s, inactive, pane(s, inactive) & ~wipe)
            s = FirewallState(s.pane0, s.pane1, inactive, t, 0)
        # pace the cleaner so the whole inactive pane is covered within
        # one window regardless of how often traffic arrives
        target = min(m, m * (t - s.rotated_at) // cfg.window)
        if target > s.cursor:
            inactive = 1 - s.active
            wipe = (1 << target) - (1 << s.cursor)
            s = with_pane(s, inactive, pane(s, inactive) & ~wipe)
            s = FirewallState(s.pane0, s.pane1, s.active, s.rotated_at, target)
        return s

    def insert(s: FirewallState, key: int) -> FirewallState:
        bits = 0
        for pos in positions(key):
            bits |= 1 << pos
        return FirewallState(s.pane0 | bits, s.pane1 | bits,
                             s.active, s.rotated_at, s.cursor)

    def remembered(s: FirewallState, key: int) -> bool:
        union = s.pane0 | s.pane1
        return all(union >> pos & 1 for pos in positions(key))

    def in_parser(p, s):
        return parse_standard(p), s

    def in_control(d, s):
        t, in_port, slots = d
        s = maintain(t, s)
        if slots["ethernet"]["ethertype"] == KEEPALIVE_ETHERTYPE:
            return (_tm(drop=1), MirrorId(), slots), s
        if in_port == cfg.outside_port:
            key = flow_key(slots, inbound=True)
            if key is not None and remembered(s, key):
                return (_tm(ucast=cfg.inside_port), MirrorId(), slots), s
            return (_tm(drop=1), MirrorId(), slots), s
        key = flow_key(slots, inbound=False)
        if key is not None:
            s = insert(s, key)
        return (_tm(ucast=cfg.outside_port), MirrorId(), slots), s

    def in_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    def e_parser(d, s):
        em, p = d
        return parse_standard(p), s

    def e_control(d, s):
        em, slots = d
        return slots, s

    def e_deparser(slots, s):
        return (EgressIndication(), deparse_slots(slots)), s

    pktgen = PktGenConfig(enabled=True, period=cfg.keepalive_period,
                          template=keepalive_template(cfg))
    comps = Components(in_parser, in_control, in_deparser,
                       e_parser, e_control, e_deparser)
    return AppBundle(name="firewall", components=comps, mc=McConfig(),
                     pktgen=pktgen,
                     qac=qac if qac is not None else QacMinimal(),
                     init_ingress=(None, FirewallState(), None),
                     init_egress=(None, None, None))


# ---------------------------------------------------------------------------
# config-file entry point


def app_from_config(obj: dict) -> AppBundle:
    """Build a bundle from a JSON-ish config mapping (see the CLI)."""
    from .engines import qac_policy_from_json
    kind = obj.get("app", "identity")
    qac = qac_policy_from_json(obj["qac"]) if "qac" in obj else None
    pktgen = PktGenConfig.from_json(obj["pktgen"]) if "pktgen" in obj else None
    if kind == "identity":
        mc = McConfig.from_json(obj["mc"]) if "mc" in obj else None
        return identity_app(forward_port=int(obj.get("forward_port", 1)),
                            mc=mc, pktgen=pktgen, qac=qac)
    if kind == "sampler":
        known = ("forward_port", "monitor_port", "monitor_group",
                 "sample_every", "forward_rid", "monitor_rid")
        cfg = SamplerConfig(**{k: int(obj[k]) for k in known if k in obj})
        return sampler_app(cfg, pktgen=pktgen, qac=qac)
    if kind == "firewall":
        known = ("inside_port", "outside_port", "window", "bits",
                 "hash_count", "hash_seed", "keepalive_period")
        cfg = FirewallConfig(**{k: int(obj[k]) for k in known if k in obj})
        return firewall_app(cfg, qac=qac)
    raise ValueError(f"unknown app {kind!r}")
