"""Shared builders and independent reference implementations.

The reference functions here are deliberately written from the
definitions rather than by calling into the package, so the tests can
cross-check the real implementations against something that was derived
separately:

* ``ref_matches``      - brute-force format matcher that enumerates every
                         split point instead of committing to one.
* ``ref_pktgen_times`` - closed-form emission schedule for the periodic
                         packet generator.
* ``RefFirewall``      - exact last-seen-time table, the ideal the Bloom
                         pane construction approximates one-sidedly.
* ``forge_catalog``    - honest traces with one surgical edit each,
                         labelled with the clause the edit violates.
"""

import dataclasses
import random

from dataplane.packet_format import (
    BitString,
    Branch,
    Concat,
    Empty,
    Environment,
    ExactPlain,
    ExactValue,
    HeaderType,
    TypedValue,
    check_well_formed,
    encode,
    seq,
)
from dataplane.headers import (
    IP_PROTO_TCP,
    IP_PROTO_UDP,
    build_packet,
    make_ethernet,
    make_intrinsic_meta,
    make_ipv4,
    make_port_meta,
    make_tcp,
    make_udp,
)
from dataplane.engines import (
    EgressMeta,
    PktGenConfig,
    PktGenState,
    QacAlwaysReady,
    UNICAST,
    pktgen_tick,
)
from dataplane.switch import (
    Arrival,
    FifoDrainOracle,
    Oracle,
    SwitchQueues,
    Trace,
    run,
)
from dataplane.apps import (
    AppBundle,
    FirewallState,
    SamplerConfig,
    firewall_app,
    identity_app,
    initial_switch_state,
    keepalive_template,
    parse_standard,
    sampler_app,
    switch_config,
)


# ---------------------------------------------------------------------------
# packet builders


def tcp_pkt(*, src=0x0A000001, dst=0x0A000002, sp=1234, dp=80,
            in_port=0, payload=b"", ttl=64) -> BitString:
    return build_packet(
        meta=make_intrinsic_meta(ingress_port=in_port),
        port_md=make_port_meta(),
        ethernet=make_ethernet(dst=0x0000_5E00_5301, src=0x0000_5E00_5302,
                               ethertype=0x0800),
        ipv4=make_ipv4(protocol=IP_PROTO_TCP, src=src, dst=dst, ttl=ttl),
        l4=make_tcp(src_port=sp, dst_port=dp),
        payload=BitString.from_bytes(payload),
    )


def udp_pkt(*, src=0x0A000001, dst=0x0A000002, sp=5353, dp=53,
            in_port=0, payload=b"") -> BitString:
    return build_packet(
        meta=make_intrinsic_meta(ingress_port=in_port),
        ethernet=make_ethernet(ethertype=0x0800),
        ipv4=make_ipv4(protocol=IP_PROTO_UDP, src=src, dst=dst),
        l4=make_udp(src_port=sp, dst_port=dp),
        payload=BitString.from_bytes(payload),
    )


def bare_ip_pkt(*, protocol=1, payload=b"") -> BitString:
    """No L4 header; the standard format's branch falls through."""
    return build_packet(ipv4=make_ipv4(protocol=protocol),
                        payload=BitString.from_bytes(payload))


def rand_packet(rng: random.Random, *, payload_max=8) -> BitString:
    payload = rng.randbytes(rng.randrange(payload_max + 1))
    kind = rng.randrange(3)
    if kind == 0:
        return tcp_pkt(src=rng.getrandbits(32), dst=rng.getrandbits(32),
                       sp=rng.getrandbits(16), dp=rng.getrandbits(16),
                       payload=payload)
    if kind == 1:
        return udp_pkt(src=rng.getrandbits(32), dst=rng.getrandbits(32),
                       sp=rng.getrandbits(16), dp=rng.getrandbits(16),
                       payload=payload)
    return bare_ip_pkt(protocol=rng.choice([0, 1, 2, 50]), payload=payload)


def mangle(rng: random.Random, p: BitString) -> BitString:
    """Damage a packet so the standard parser must reject it.

    Truncation below the shortest parseable layout (400 bits) is the
    only reliable mutation: the fixed headers accept any bit pattern,
    so bit flips usually still parse.
    """
    cut = rng.randrange(1, min(len(p), 400))
    out = p.take(cut)
    if rng.random() < 0.5 and len(out) > 0:
        flip = rng.randrange(len(out))
        out = BitString(out.value ^ (1 << (len(out) - 1 - flip)), len(out))
    return out


def rand_typed(rng: random.Random, htype: HeaderType) -> TypedValue:
    return TypedValue(htype, {n: rng.getrandbits(w) for n, w in htype.fields})


# ---------------------------------------------------------------------------
# reference format matcher: enumerate every denotation


def ref_matches(p: BitString, f) -> bool:
    """Brute-force matcher.  Where the production matcher commits to the
    single split a well-formed format permits, this one tries every split
    of every ExactPlain and asks whether ANY complete parse exists."""
    check_well_formed(f)

    def ends(g, pos, env):
        if isinstance(g, Empty):
            yield pos, env
        elif isinstance(g, ExactValue):
            w = g.htype.total_width
            if pos + w <= len(p):
                vals, off = {}, pos
                for fname, fw in g.htype.fields:
                    vals[fname] = p.slice(off, fw).value
                    off += fw
                yield off, {**env, g.name: TypedValue(g.htype, vals)}
        elif isinstance(g, ExactPlain):
            for end in range(pos, len(p) + 1):
                yield end, {**env, g.name: p.slice(pos, end - pos)}
        elif isinstance(g, Concat):
            for mid, e1 in ends(g.left, pos, env):
                yield from ends(g.right, mid, e1)
        elif isinstance(g, Branch):
            arm = g.then if g.cond(Environment(env)) else g.els
            yield from ends(arm, pos, env)
        else:
            raise TypeError(f"not a Format: {g!r}")

    return any(end == len(p) for end, _ in ends(f, 0, {}))


class _FieldParity:
    """Picklable, deterministic branch predicate: parity of one field."""

    def __init__(self, name: str, fname: str, want: int) -> None:
        self.name, self.fname, self.want = name, fname, want

    def __call__(self, env) -> bool:
        return env[self.name][self.fname] & 1 == self.want


class _Const:
    def __init__(self, b: bool) -> None:
        self.b = b

    def __call__(self, env) -> bool:
        return self.b


def random_format(rng: random.Random, *, max_depth=4, max_fields=4):
    """A well-formed random format: depth-bounded tree over small
    synthetic header types, ExactPlain only in terminal position,
    branch predicates only over names bound on every path before the
    branch."""
    counter = [0]

    def fresh() -> str:
        counter[0] += 1
        return f"h{counter[0]}"

    def rand_htype(name: str) -> HeaderType:
        n = rng.randrange(1, max_fields + 1)
        return HeaderType(name, tuple((f"f{i}", rng.randrange(1, 9))
                                      for i in range(n)))

    def gen(depth: int, terminal: bool, bound: list):
        # bound: (name, htype) pairs available to predicates here
        roll = rng.random()
        if depth == 0 or roll < 0.15:
            return Empty()
        if roll < 0.45:
            name = fresh()
            ht = rand_htype(name)
            bound.append((name, ht))
            return ExactValue(name, ht)
        if roll < 0.55 and terminal:
            return ExactPlain(fresh())
        if roll < 0.80:
            left_bound = list(bound)
            left = gen(depth - 1, False, left_bound)
            # names bound by the left side are visible on the right
            right = gen(depth - 1, terminal, left_bound)
            bound[:] = left_bound
            return Concat(left, right)
        if bound:
            name, ht = rng.choice(bound)
            fname = rng.choice([n for n, _ in ht.fields])
            cond = _FieldParity(name, fname, rng.randrange(2))
        else:
            cond = _Const(rng.random() < 0.5)
        before = list(bound)
        then = gen(depth - 1, terminal, list(before))
        els = gen(depth - 1, terminal, list(before))
        # arm bindings are not certain, so predicates after the branch
        # may only use what was bound before it
        bound[:] = before
        return Branch(cond, then, els, label=f"b{counter[0]}")

    f = gen(max_depth, True, [])
    check_well_formed(f)
    return f


def sample_matching_input(rng: random.Random, f) -> BitString:
    """Walk one denotation of f, choosing field values at random; the
    result matches f by construction."""

    def walk(g, env) -> BitString:
        if isinstance(g, Empty):
            return BitString()
        if isinstance(g, ExactValue):
            v = rand_typed(rng, g.htype)
            env[g.name] = v
            return encode(v)
        if isinstance(g, ExactPlain):
            n = rng.randrange(0, 17)
            bits = BitString(rng.getrandbits(n) if n else 0, n)
            env[g.name] = bits
            return bits
        if isinstance(g, Concat):
            return walk(g.left, env) + walk(g.right, env)
        if isinstance(g, Branch):
            arm = g.then if g.cond(Environment(env)) else g.els
            return walk(arm, env)
        raise TypeError(f"not a Format: {g!r}")

    return walk(f, {})


# ---------------------------------------------------------------------------
# reference packet generator schedule


def ref_pktgen_times(c: PktGenConfig, horizon: int) -> list[int]:
    """Closed-form emission instants in [0, horizon).

    Burst b emits pkts_per_batch packets starting at
    start + b * ((pkts_per_batch - 1) * inter_pkt_gap + inter_batch_gap),
    spaced inter_pkt_gap apart; the next burst starts at the first
    multiple of period after the last emission.
    """
    if not c.enabled:
        return []
    stride = (c.pkts_per_batch - 1) * c.inter_pkt_gap + c.inter_batch_gap
    times: list[int] = []
    ready = 0
    while True:
        start = -(-ready // c.period) * c.period
        if start >= horizon:
            break
        last = start
        for b in range(c.batch_count):
            base = start + b * stride
            for k in range(c.pkts_per_batch):
                t = base + k * c.inter_pkt_gap
                last = t
                if t < horizon:
                    times.append(t)
        ready = last + 1
    return times


def executed_pktgen_times(c: PktGenConfig, horizon: int) -> list[int]:
    """Emission instants observed by actually ticking the generator."""
    s = PktGenState()
    out = []
    for t in range(horizon):
        p, s = pktgen_tick(c, t, s)
        if p is not None:
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# reference firewall


class RefFirewall:
    """Exact last-insertion table.  A flow inserted at time t0 must still
    be admitted at any t with t - t0 <= window; the Bloom construction
    may remember longer but never shorter."""

    def __init__(self, window: int) -> None:
        self.window = window
        self.last: dict[int, int] = {}

    def insert(self, key: int, t: int) -> None:
        self.last[key] = t

    def must_admit(self, key: int, t: int) -> bool:
        t0 = self.last.get(key)
        return t0 is not None and t - t0 <= self.window


class FwDriver:
    """Drive the firewall's ingress control directly with explicit ticks."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.bundle = firewall_app(cfg)
        self.state = FirewallState()

    def _step(self, t, port, pkt):
        d = (t, port, parse_standard(pkt).slots)
        (tm, _, _), self.state = self.bundle.components.in_control(d, self.state)
        return tm

    def outbound(self, t, pkt):
        return self._step(t, self.cfg.inside_port, pkt)

    def inbound(self, t, pkt):
        tm = self._step(t, self.cfg.outside_port, pkt)
        assert tm.drop or tm.ucast_egress_port == self.cfg.inside_port
        return not tm.drop

    def keepalive(self, t):
        tm = self._step(t, self.bundle.pktgen.source_port,
                        keepalive_template(self.cfg))
        assert tm.drop == 1


def flow_pair(i):
    out = tcp_pkt(src=0x0A000000 + i, dst=0xC0A80000 + i, sp=40000 + i, dp=443)
    back = tcp_pkt(src=0xC0A80000 + i, dst=0x0A000000 + i, sp=443, dp=40000 + i)
    return out, back


# ---------------------------------------------------------------------------
# run helpers


def arrivals(*packets: BitString, port: int = 0) -> tuple[Arrival, ...]:
    return tuple(Arrival(port, p) for p in packets)


def drained(qs: SwitchQueues) -> bool:
    return (not qs.q_input and not qs.q_egress and not qs.q_mirror
            and qs.p_recirc is None)


def drain_run(bundle: AppBundle, packets, oracle: Oracle | None = None,
              *, port: int = 0, cap: int | None = None) -> Trace:
    """Run until every internal queue is empty (generator-less apps)."""
    cfg = switch_config(bundle)
    st = initial_switch_state(bundle)
    qs = SwitchQueues(q_input=arrivals(*packets, port=port))
    if cap is None:
        cap = 8 * len(packets) + 64
    tr = run(cfg, st, qs, cap, oracle or FifoDrainOracle(),
             stop_when=lambda s, q: drained(q))
    assert tr.fault is None, tr.fault
    assert drained(tr.final_queues), "run did not drain"
    return tr


class AlwaysIngressOracle(Oracle):
    """Never schedules egress; queues pile up."""

    def step_kind(self, state, queues):
        return "ingress"

    def input_index(self, n):
        return 0

    def admitted_subset(self, ms, mandatory):
        return tuple(True for _ in ms)

    def sched_index(self, n):
        return 0


class AlwaysEgressOracle(FifoDrainOracle):
    """Requests egress unconditionally; the step machine must fall back
    to ingress when egress is not enabled."""

    def step_kind(self, state, queues):
        return "egress"


# ---------------------------------------------------------------------------
# forgery catalog


@dataclasses.dataclass(frozen=True)
class Forgery:
    clause: str
    cfg: object
    step: object
    note: str = ""


def _r(obj, **kw):
    return dataclasses.replace(obj, **kw)


def _flip_bit(p: BitString, i: int = 0) -> BitString:
    return BitString(p.value ^ (1 << (len(p) - 1 - i)), len(p))


def forge_catalog() -> list[Forgery]:
    """One doctored step per checkable clause.

    Each entry starts from a step produced by an honest run, applies a
    single edit, and names the clause a checker must blame.  Keep this
    list in sync with checker.CLAUSES.
    """
    out: list[Forgery] = []

    # -- identity app material ------------------------------------------
    ident = identity_app(forward_port=1)
    icfg = switch_config(ident)
    p_a, p_b = tcp_pkt(sp=1000), udp_pkt(sp=2000)
    tr = drain_run(ident, [p_a, p_b])
    ing = [s for s in tr.steps if s.kind == "ingress" and s.detail.p_i is not None]
    egr = [s for s in tr.steps if s.kind == "egress"]
    assert ing and egr
    s_in, s_eg = ing[0], egr[0]
    # an idle tick needs an empty input queue, which drain_run never reaches
    tr_idle = run(icfg, initial_switch_state(ident), SwitchQueues(), 1,
                  FifoDrainOracle())
    s_id = tr_idle.steps[0]
    assert s_id.detail.p_i is None

    def add(clause, cfg, step, note=""):
        out.append(Forgery(clause, cfg, step, note))

    add("ingress.clock", icfg,
        _r(s_in, post_state=_r(s_in.post_state, t=s_in.post_state.t + 1)),
        "clock jumped by 2")
    add("ingress.frame.s_e", icfg,
        _r(s_in, post_state=_r(s_in.post_state, s_e=("tampered",))))
    add("ingress.frame.q_output", icfg,
        _r(s_in, post_queues=_r(s_in.post_queues,
                                q_output=s_in.post_queues.q_output + ((7, p_a),))))
    add("ingress.pktgen_behavior", icfg,
        _r(s_in, post_state=_r(s_in.post_state,
                               s_g=PktGenState("emitting", 9, 0, 1))),
        "generator state moved while disabled")
    add("ingress.input_ports", icfg,
        _r(s_in, post_queues=_r(s_in.post_queues, q_input=())),
        "two packets vanished in one step")
    add("ingress.pipeline", icfg,
        _r(s_in, post_state=_r(s_in.post_state,
                               s_i=(None, "corrupt", s_in.post_state.s_i[2]))))
    add("ingress.mirror_empty", icfg,
        _r(s_in, post_queues=_r(s_in.post_queues, q_mirror=(("m", p_a),))))
    add("ingress.no_packet_frame", icfg,
        _r(s_id, post_state=_r(s_id.post_state, s_i=(None, "x", None))))
    add("trace.step_kind", icfg, _r(s_in, kind="sideways"))

    # replication/admission edits need the enqueued copy
    raw = s_in.detail.enqueued[0][1]
    bogus = (EgressMeta(egress_port=9, rid=0, source=UNICAST), raw)
    add("ingress.replication", icfg,
        _r(s_in, post_queues=_r(s_in.post_queues,
                                q_egress=s_in.post_queues.q_egress + (bogus,))),
        "copy to a port the pipeline never named")

    # -- egress-side edits ------------------------------------------------
    add("egress.clock", icfg,
        _r(s_eg, post_state=_r(s_eg.post_state, t=s_eg.post_state.t + 1)),
        "egress must not advance time")
    add("egress.frame.s_g", icfg,
        _r(s_eg, post_state=_r(s_eg.post_state,
                               s_g=PktGenState("emitting", 9, 0, 1))))
    add("egress.frame.s_i", icfg,
        _r(s_eg, post_state=_r(s_eg.post_state, s_i=(None, "x", None))))
    add("egress.frame.q_input", icfg,
        _r(s_eg, post_queues=_r(s_eg.post_queues,
                                q_input=s_eg.post_queues.q_input[1:])))
    add("egress.frame.q_mirror", icfg,
        _r(s_eg, post_queues=_r(s_eg.post_queues, q_mirror=(("m", p_a),))))
    add("egress.enabled", icfg,
        _r(s_eg, pre_queues=_r(s_eg.pre_queues, p_recirc=p_a)),
        "register occupied, egress should be blocked")
    add("egress.pipeline", icfg,
        _r(s_eg, post_state=_r(s_eg.post_state, s_e=("tampered", None, None))))
    last_out = s_eg.post_queues.q_output[-1]
    add("egress.output_ports", icfg,
        _r(s_eg, post_queues=_r(s_eg.post_queues,
                                q_output=s_eg.post_queues.q_output[:-1]
                                + ((last_out[0], _flip_bit(last_out[1])),))),
        "transmitted bytes differ from the deparser's output")

    # -- reject isolation --------------------------------------------------
    bad = p_a.take(100)
    tr_bad = run(icfg, initial_switch_state(ident),
                 SwitchQueues(q_input=arrivals(bad)), 1, FifoDrainOracle())
    s_rej = tr_bad.steps[0]
    assert s_rej.detail.pipeline_out is None and s_rej.detail.p_i is not None
    add("ingress.reject_isolation", icfg,
        _r(s_rej, post_queues=_r(s_rej.post_queues,
                                 q_egress=s_in.post_queues.q_egress)),
        "rejected packet still reached the egress queue")

    # -- sampler material: two copies per packet, non-empty pre-queues ----
    sam = sampler_app(SamplerConfig(sample_every=1))
    scfg_sw = switch_config(sam)
    tr_s = run(scfg_sw, initial_switch_state(sam),
               SwitchQueues(q_input=arrivals(p_a, p_b)), 2, AlwaysIngressOracle())
    st1 = tr_s.steps[1]
    assert len(st1.pre_queues.q_egress) == 2 and len(st1.detail.enqueued) == 2
    fwd, mon = st1.detail.enqueued
    base = st1.pre_queues.q_egress
    add("ingress.qac_prefix", scfg_sw,
        _r(st1, post_queues=_r(st1.post_queues,
                               q_egress=(base[1], base[0]) + (fwd, mon))),
        "pre-existing queue entries swapped")
    add("ingress.qac_subsequence", scfg_sw,
        _r(st1, post_queues=_r(st1.post_queues, q_egress=base + (mon, fwd))),
        "admitted copies out of pipeline order")

    # dropping a copy the policy marks mandatory
    ready = dataclasses.replace(ident, qac=QacAlwaysReady())
    rcfg = switch_config(ready)
    tr_r = run(rcfg, initial_switch_state(ready),
               SwitchQueues(q_input=arrivals(p_a)), 1, FifoDrainOracle())
    s_rdy = tr_r.steps[0]
    assert len(s_rdy.detail.enqueued) == 1
    add("ingress.qac_mandatory", rcfg,
        _r(s_rdy, post_queues=_r(s_rdy.post_queues,
                                 q_egress=s_rdy.pre_queues.q_egress)),
        "always-ready port dropped its copy")

    # scheduling two removals in one egress step
    tr_s2 = run(scfg_sw, initial_switch_state(sam),
                SwitchQueues(q_input=arrivals(p_a)), 2, FifoDrainOracle())
    s_eg2 = tr_s2.steps[1]
    assert s_eg2.kind == "egress" and len(s_eg2.pre_queues.q_egress) == 2
    add("egress.scheduler_split", scfg_sw,
        _r(s_eg2, post_queues=_r(s_eg2.post_queues, q_egress=())),
        "two queue entries left in one step")

    return out
