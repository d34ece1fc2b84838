"""Relational trace checker.

Every switch step is replayed against the transition relation, clause
by clause, from the recorded pre-state alone.  A violation names the
clause that failed, so a forged or corrupted trace is pinned to the
exact frame condition or engine equation it breaks.  On top of the
per-step axioms sit whole-trace checks: the sampler's input/output
relation, the malformed-input isolation property, parser
obliviousness, and the firewall's freshness guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from . import engines
from .apps import KEEPALIVE_ETHERTYPE, deparse_slots, flow_key, parse_standard
from .headers import make_sample
from .packet_format import BitString, Format, matches
from .pipeline import egress_pipeline, ingress_pipeline
from .switch import EGRESS, INGRESS, SwitchConfig, Trace, TraceStep


class PreconditionUnmet(Exception):
    """The trace does not satisfy a check's hypothesis; the check is
    neither passed nor failed."""


@dataclass(frozen=True)
class Verdict:
    ok: bool
    violated_clause: Optional[str] = None
    detail: str = ""
    step: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


OK = Verdict(True)


def _bad(clause: str, detail: str = "") -> Verdict:
    if clause not in CLAUSES:
        raise KeyError(f"unregistered clause {clause!r}")
    return Verdict(False, clause, detail)


# Stable ids for every checkable clause.  Tests pin this set; renaming
# an id is a breaking change for stored verdicts.
CLAUSES = {
    "ingress.clock": "t advances by exactly one tick",
    "ingress.frame.s_e": "egress component states untouched",
    "ingress.frame.q_output": "output queue untouched",
    "ingress.pktgen_behavior": "generator output, register drain and state follow the timer relation",
    "ingress.input_ports": "input queue loses exactly the consumed arrival, nothing else",
    "ingress.no_packet_frame": "with no packet, only t and the generator state may move",
    "ingress.reject_isolation": "a parser reject leaves control/deparser state and all queues alone",
    "ingress.pipeline": "ingress parser/control/deparser recomputation matches the recorded states",
    "ingress.mirror_empty": "mirror buffer stays empty under the empty mirror table",
    "ingress.replication": "every enqueued copy comes from the replication walk with the deparsed bits",
    "ingress.qac_prefix": "previously queued copies survive admission in place",
    "ingress.qac_subsequence": "admitted copies are an in-order subsequence of the replication output",
    "ingress.qac_mandatory": "copies to always-ready ports are never dropped",
    "egress.enabled": "egress requires an empty recirculation register and a nonempty queue",
    "egress.clock": "t does not move on egress",
    "egress.frame.s_g": "generator state untouched on egress",
    "egress.frame.s_i": "ingress component states untouched on egress",
    "egress.frame.q_input": "input queue untouched on egress",
    "egress.frame.q_mirror": "mirror buffer untouched on egress",
    "egress.scheduler_split": "exactly one queued copy leaves the egress queue",
    "egress.pipeline": "egress parser/control/deparser recomputation matches the recorded states",
    "egress.output_ports": "the result is transmitted or recirculated, never both or neither",
    "trace.continuity": "each step starts from the previous step's post-state",
    "trace.step_kind": "step kind is one of the two defined kinds",
    "trace.divergence": "a recorded step disagrees with decision-for-decision replay",
}


# ---------------------------------------------------------------------------
# per-step axioms


def check_step(cfg: SwitchConfig, step: TraceStep) -> Verdict:
    if step.kind == INGRESS:
        return _check_ingress(cfg, step)
    if step.kind == EGRESS:
        return _check_egress(cfg, step)
    return _bad("trace.step_kind", f"kind {step.kind!r}")


def _check_ingress(cfg: SwitchConfig, step: TraceStep) -> Verdict:
    pre_s, pre_q = step.pre_state, step.pre_queues
    post_s, post_q = step.post_state, step.post_queues

    if post_s.t != pre_s.t + 1:
        return _bad("ingress.clock", f"{pre_s.t} -> {post_s.t}")
    if post_s.s_e != pre_s.s_e:
        return _bad("ingress.frame.s_e")
    if post_q.q_output != pre_q.q_output:
        return _bad("ingress.frame.q_output")

    p_g, reg2, s_g2 = engines.packet_generator(cfg.pktgen, pre_s.t, pre_s.s_g,
                                               pre_q.p_recirc)
    if post_s.s_g != s_g2 or post_q.p_recirc != reg2:
        return _bad("ingress.pktgen_behavior",
                    f"expected s_g={s_g2}, register={reg2}")

    # which packet entered the pipeline, and what must q_input become
    if p_g is not None:
        if post_q.q_input != pre_q.q_input:
            return _bad("ingress.input_ports",
                        "queue must not move when the generator supplies the packet")
        p_i, in_port = p_g, cfg.pktgen.source_port
    elif not pre_q.q_input:
        if post_q.q_input != pre_q.q_input:
            return _bad("ingress.input_ports", "queue changed while empty")
        p_i, in_port = None, None
    else:
        idx = _removal_index(pre_q.q_input, post_q.q_input,
                             step.decisions.get("input_index"))
        if idx is None:
            return _bad("ingress.input_ports",
                        "post queue is not the pre queue minus one arrival")
        p_i, in_port = pre_q.q_input[idx].packet, pre_q.q_input[idx].port

    if p_i is None:
        if (post_s.s_i != pre_s.s_i or post_q.q_egress != pre_q.q_egress
                or post_q.q_mirror != pre_q.q_mirror):
            return _bad("ingress.no_packet_frame")
        return OK

    out, s_i2 = ingress_pipeline(cfg.components, pre_s.t, in_port, p_i, pre_s.s_i)
    if post_s.s_i != s_i2:
        return _bad("ingress.pipeline", "component states diverge on recomputation")

    if out is None:
        if post_q.q_egress != pre_q.q_egress or post_q.q_mirror != pre_q.q_mirror:
            return _bad("ingress.reject_isolation", "queues moved on a parser reject")
        return OK

    tm, mirror_id, _ind, raw_out = out
    engines.mirror_session_lookup(cfg.mirror, mirror_id)
    if post_q.q_mirror != ():
        return _bad("ingress.mirror_empty")

    copies = engines.replication_engine(cfg.mc, tm)
    candidates = tuple((em, raw_out) for em in copies)

    n = len(pre_q.q_egress)
    if post_q.q_egress[:n] != pre_q.q_egress:
        return _bad("ingress.qac_prefix")
    appended = post_q.q_egress[n:]
    for em, p in appended:
        if (em, p) not in candidates:
            return _bad("ingress.replication",
                        f"copy to port {em.egress_port} not produced by replication")
    if not _is_subsequence(appended, candidates):
        return _bad("ingress.qac_subsequence", "admitted copies out of order")
    mandatory = engines.mandatory_mask(cfg.qac, copies)
    kept = _subsequence_mask(appended, candidates)
    for must, got in zip(mandatory, kept):
        if must and not got:
            return _bad("ingress.qac_mandatory")
    return OK


def _check_egress(cfg: SwitchConfig, step: TraceStep) -> Verdict:
    pre_s, pre_q = step.pre_state, step.pre_queues
    post_s, post_q = step.post_state, step.post_queues

    if pre_q.p_recirc is not None or not pre_q.q_egress:
        return _bad("egress.enabled")
    if post_s.t != pre_s.t:
        return _bad("egress.clock")
    if post_s.s_g != pre_s.s_g:
        return _bad("egress.frame.s_g")
    if post_s.s_i != pre_s.s_i:
        return _bad("egress.frame.s_i")
    if post_q.q_input != pre_q.q_input:
        return _bad("egress.frame.q_input")
    if post_q.q_mirror != pre_q.q_mirror:
        return _bad("egress.frame.q_mirror")

    # any index whose removal explains the post queue is a candidate;
    # the recorded decision is tried first
    idxs = [i for i in range(len(pre_q.q_egress))
            if pre_q.q_egress[:i] + pre_q.q_egress[i + 1:] == post_q.q_egress]
    if not idxs:
        return _bad("egress.scheduler_split",
                    "post queue is not the pre queue minus one copy")
    recorded = step.decisions.get("sched_index")
    if recorded in idxs:
        idxs.remove(recorded)
        idxs.insert(0, recorded)

    last = None
    for i in idxs:
        em, p_e = pre_q.q_egress[i]
        (ind, p_out), s_e2 = egress_pipeline(cfg.components, em, p_e, pre_s.s_e)
        if post_s.s_e != s_e2:
            last = _bad("egress.pipeline", "component states diverge on recomputation")
            continue
        if ind.recirculate:
            if post_q.p_recirc == p_out and post_q.q_output == pre_q.q_output:
                return OK
        else:
            if (post_q.p_recirc is None
                    and post_q.q_output == pre_q.q_output + ((em.egress_port, p_out),)):
                return OK
        last = _bad("egress.output_ports",
                    "neither transmission nor recirculation explains the post queues")
    return last


def _removal_index(before: tuple, after: tuple, hint) -> Optional[int]:
    if isinstance(hint, int) and 0 <= hint < len(before):
        if before[:hint] + before[hint + 1:] == after:
            return hint
    for i in range(len(before)):
        if before[:i] + before[i + 1:] == after:
            return i
    return None


def _is_subsequence(sub: Sequence, seq: Sequence) -> bool:
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def _is_subsequence_dp(sub: Sequence, seq: Sequence) -> bool:
    """Reachability-table equivalent of _is_subsequence; quadratic.
    Kept as an independent cross-check of the greedy scan."""
    reach = [True] + [False] * len(sub)
    for y in seq:
        for i in range(len(sub), 0, -1):
            if reach[i - 1] and sub[i - 1] == y:
                reach[i] = True
    return reach[len(sub)]


def _subsequence_mask(sub: Sequence, seq: Sequence) -> tuple[bool, ...]:
    """Greedy left-to-right embedding of sub into seq as a mask over seq.
    Greedy is enough here: elements are compared by equality, so taking
    the earliest possible match never blocks a later one."""
    mask = [False] * len(seq)
    j = 0
    for x in sub:
        while j < len(seq) and seq[j] != x:
            j += 1
        if j == len(seq):
            return tuple(mask)
        mask[j] = True
        j += 1
    return tuple(mask)


# ---------------------------------------------------------------------------
# whole-trace axioms


def check_trace(cfg: SwitchConfig, trace: Trace) -> Verdict:
    """Continuity plus every per-step clause; first violation wins."""
    prev_s, prev_q = trace.initial_state, trace.initial_queues
    for i, step in enumerate(trace.steps):
        if step.pre_state != prev_s or step.pre_queues != prev_q:
            return Verdict(False, "trace.continuity",
                           "step does not start at the previous post-state", i)
        v = check_step(cfg, step)
        if not v:
            return Verdict(False, v.violated_clause, v.detail, i)
        prev_s, prev_q = step.post_state, step.post_queues
    if trace.final_state != prev_s or trace.final_queues != prev_q:
        return Verdict(False, "trace.continuity", "final snapshot diverges",
                       len(trace.steps))
    return OK


# ---------------------------------------------------------------------------
# sampler input/output relation


def normal_packet_relation(p_in: BitString, out: tuple, scfg) -> bool:
    """The forwarded copy: original bytes on the forward port."""
    port, bits = out
    return port == scfg.forward_port and bits == p_in


def special_packet_relation(count: int, p_in: BitString, out: tuple, scfg) -> bool:
    """The monitor copy: sample record built from p_in's addressing
    fields, tagged with the global count, followed by p_in's payload."""
    port, bits = out
    return port == scfg.monitor_port and bits == expected_sample_packet(count, p_in)


def expected_sample_packet(count: int, p_in: BitString) -> BitString:
    parsed = parse_standard(p_in)
    ipv4 = parsed.slots["ipv4"]
    l4 = parsed.slots.get("tcp") or parsed.slots.get("udp")
    rec = make_sample(
        src_addr=ipv4["src"], dst_addr=ipv4["dst"],
        src_port=l4["src_port"] if l4 is not None else 0,
        dst_port=l4["dst_port"] if l4 is not None else 0,
        sample_count=count)
    return deparse_slots({"sample": rec}) + parsed.payload


def _expected_entries(n: int, inputs: Sequence[BitString], scfg) -> list[tuple]:
    """(kind, count, p_in) per expected output, in order: the forwarded
    copy of input i, then its monitor copy when (n+i) hits a sampling
    multiple."""
    entries = []
    c = n
    for p in inputs:
        c = (c + 1) % (1 << 32)
        entries.append(("normal", c, p))
        if c % scfg.sample_every == 0:
            entries.append(("special", c, p))
    return entries


def _entry_matches(entry: tuple, out: tuple, scfg) -> bool:
    kind, count, p_in = entry
    if kind == "normal":
        return normal_packet_relation(p_in, out, scfg)
    return special_packet_relation(count, p_in, out, scfg)


def sampler_spec_check(n: int, inputs: Sequence[BitString],
                       outputs: Sequence[tuple], scfg=None, *,
                       require_complete: bool = False) -> Verdict:
    """Decide the sampler's input/output relation.

    Per input packet i (1-based) the expected outputs are the original
    bytes on the forward port, plus, when (n+i) is a sampling multiple,
    a monitor copy.  The actual outputs must align greedily, in order,
    against that expected sequence; admission drops and in-flight
    packets only shorten it.  Greedy alignment is exact here because
    distinct expected entries are distinguishable (payload identity and
    the monotone sample count); _sampler_check_dp corroborates it.
    With require_complete the alignment must also be onto.
    """
    if scfg is None:
        from .apps import SamplerConfig
        scfg = SamplerConfig()
    expected = _expected_entries(n, inputs, scfg)
    j = 0
    for k, out in enumerate(outputs):
        port = out[0]
        if port not in (scfg.forward_port, scfg.monitor_port):
            return Verdict(False, "sampler.unexpected_port", f"port {port}", k)
        while j < len(expected) and not _entry_matches(expected[j], out, scfg):
            j += 1
        if j == len(expected):
            return Verdict(False, "sampler.stream",
                           f"output {k} aligns with no expected packet", k)
        j += 1
    if require_complete and len(outputs) != len(expected):
        return Verdict(False, "sampler.incomplete",
                       f"{len(outputs)} outputs for {len(expected)} expected")
    return OK


def _sampler_check_dp(n: int, inputs: Sequence[BitString],
                      outputs: Sequence[tuple], scfg) -> bool:
    """Reachability-table fallback for adversarial equal-packet
    streams; quadratic, no clause attribution."""
    expected = _expected_entries(n, inputs, scfg)
    reach = [True] + [False] * len(outputs)
    for entry in expected:
        for i in range(len(outputs), 0, -1):
            if reach[i - 1] and _entry_matches(entry, outputs[i - 1], scfg):
                reach[i] = True
    return reach[len(outputs)]


def sampler_io(trace: Trace) -> tuple[int, list[BitString], list[tuple]]:
    """Project a trace onto (initial count, parsed inputs in consumption
    order, transmitted outputs in emission order)."""
    n = trace.initial_state.s_i[1].counter
    inputs = [step.detail.p_i for step in trace.steps
              if step.kind == INGRESS and step.detail.p_i is not None
              and step.detail.pipeline_out is not None]
    return n, inputs, list(trace.final_queues.q_output)


def sampler_trace_check(trace: Trace, scfg, *, require_complete: bool = False) -> Verdict:
    n, inputs, outputs = sampler_io(trace)
    if require_complete:
        q = trace.final_queues
        if q.q_input or q.q_egress or q.p_recirc is not None:
            return Verdict(False, "sampler.incomplete", "packets still in flight")
    return sampler_spec_check(n, inputs, outputs, scfg,
                              require_complete=require_complete)


SAMPLER_CLAUSES = {
    "sampler.stream": "outputs align in order with the expected forward/monitor sequence",
    "sampler.unexpected_port": "no copy leaves on an unconfigured port",
    "sampler.incomplete": "a complete run must emit every expected packet",
}


# ---------------------------------------------------------------------------
# malformed-input isolation


def langsec_check(bundle, p_bad: BitString, st=None, qs=None, oracle=None, *,
                  port: int = 0) -> Verdict:
    """Feed one unparseable packet through one ingress step and verify
    it is dropped with no effect: every queue but q_input and every
    state slot but the ingress parser's must stay put.

    Raises PreconditionUnmet when the parser accepts p_bad or when the
    generator preempts it this tick.
    """
    from .apps import initial_switch_state, switch_config
    from .switch import Arrival, FifoDrainOracle, SwitchQueues, ingress_step
    import dataclasses
    cfg = switch_config(bundle)
    if st is None:
        st = initial_switch_state(bundle)
    if qs is None:
        qs = SwitchQueues()
    if oracle is None:
        oracle = FifoDrainOracle()
    seeded = dataclasses.replace(qs, q_input=(Arrival(port, p_bad),) + qs.q_input)
    _st2, qs2, step = ingress_step(cfg, st, seeded, oracle)
    if step.detail.p_g is not None:
        raise PreconditionUnmet("the generator preempted the input this tick")
    if step.detail.p_i != p_bad:
        raise PreconditionUnmet("the oracle consumed a different arrival")
    if step.detail.pipeline_out is not None:
        raise PreconditionUnmet("the parser accepts this packet")
    return _isolation_frame(step, expected_q_input=qs.q_input)


def langsec_trace_check(trace: Trace, cfg: SwitchConfig) -> Verdict:
    """Whole-trace form: with the generator off and every input
    unparseable, nothing but the clock, the parser state slot and
    q_input may move on any step."""
    if cfg.pktgen.enabled:
        raise PreconditionUnmet("generator must be disabled")
    for i, step in enumerate(trace.steps):
        if step.kind != INGRESS:
            return Verdict(False, "langsec.queue_frame",
                           "an egress step implies something was admitted", i)
        if step.detail.pipeline_out is not None:
            raise PreconditionUnmet(f"input at step {i} parsed successfully")
        v = _isolation_frame(step, expected_q_input=None)
        if not v:
            return Verdict(False, v.violated_clause, v.detail, i)
    return OK


def _isolation_frame(step: TraceStep, expected_q_input) -> Verdict:
    pre_s, post_s = step.pre_state, step.post_state
    pre_q, post_q = step.pre_queues, step.post_queues
    if (post_s.s_g != pre_s.s_g or post_s.s_e != pre_s.s_e
            or post_s.s_i[1] != pre_s.s_i[1] or post_s.s_i[2] != pre_s.s_i[2]):
        return Verdict(False, "langsec.state_frame", "a non-parser state slot moved")
    if (post_q.q_egress != pre_q.q_egress or post_q.q_output != pre_q.q_output
            or post_q.q_mirror != pre_q.q_mirror or post_q.p_recirc is not None):
        return Verdict(False, "langsec.queue_frame",
                       "a queue other than q_input moved")
    if expected_q_input is not None:
        if post_q.q_input != expected_q_input:
            return Verdict(False, "langsec.queue_frame",
                           "q_input lost more than the bad packet")
    elif not _queue_is_suffix_minus_one(pre_q.q_input, post_q.q_input):
        return Verdict(False, "langsec.queue_frame",
                       "q_input did not shrink by at most one arrival")
    return OK


LANGSEC_CLAUSES = {
    "langsec.state_frame": "malformed input reaches no state slot beyond the parser",
    "langsec.queue_frame": "malformed input reaches no queue beyond q_input",
}


def _queue_is_suffix_minus_one(before: tuple, after: tuple) -> bool:
    if before == after:
        return True
    return any(before[:i] + before[i + 1:] == after for i in range(len(before)))


# ---------------------------------------------------------------------------
# parser obliviousness


def parser_oblivious_check(parser: Callable, p: BitString, s1, s2) -> Verdict:
    """The parser's result may not depend on its state argument: run it
    from s1 and s2 and require identical parsed data (or identical
    rejection)."""
    d1, _ = parser(p, s1)
    d2, _ = parser(p, s2)
    if d1 != d2:
        return Verdict(False, "parser.obliviousness",
                       "parsed result depends on the parser state")
    return OK


def format_acceptance_check(parse_fn: Callable[[BitString], object],
                            fmt: Format,
                            packets: Sequence[BitString]) -> Verdict:
    """The parser must accept exactly the packets its declared format
    matches, and re-serializing what it parsed must reproduce the
    input bit for bit."""
    for i, p in enumerate(packets):
        parsed = parse_fn(p)
        accepted, _env = matches(p, fmt)
        if (parsed is not None) != accepted:
            word = "accepts" if parsed is not None else "rejects"
            return Verdict(False, "parser.format_acceptance",
                           f"packet {i}: parser {word} what the format does not")
        if parsed is not None:
            rebuilt = deparse_slots(parsed.slots) + parsed.payload
            if rebuilt != p:
                return Verdict(False, "parser.roundtrip",
                               f"packet {i}: reparse-serialize is not the identity")
    return OK


PARSER_CLAUSES = {
    "parser.obliviousness": "parsing is a function of the input bits alone",
    "parser.format_acceptance": "acceptance coincides with the declared packet format",
    "parser.roundtrip": "parse then serialize reproduces the accepted input",
}


# ---------------------------------------------------------------------------
# flow density and firewall freshness


def dense_flow_check(trace: Trace, gap_limit: int) -> Verdict:
    """Consecutive packet-carrying ingress steps may be at most
    gap_limit ticks apart.  A keepalive generator with period equal to
    gap_limit discharges this even with no external traffic."""
    last = None
    for i, step in enumerate(trace.steps):
        if step.kind != INGRESS or step.detail.p_i is None:
            continue
        t = step.pre_state.t
        if last is not None and t - last > gap_limit:
            return Verdict(False, "denseflow.gap",
                           f"{t - last} ticks between packets", i)
        last = t
    return OK


def firewall_freshness_check(trace: Trace, fwcfg, gap: int) -> Verdict:
    """No inbound packet of a flow inserted within the last `gap` ticks
    may be dropped.  Sound for gap <= the firewall window; a larger gap
    asks for more memory than the filter promises."""
    last_insert: dict[int, int] = {}
    for i, step in enumerate(trace.steps):
        if step.kind != INGRESS or step.detail.p_i is None:
            continue
        parsed = parse_standard(step.detail.p_i)
        if parsed is None:
            continue
        if parsed.slots["ethernet"]["ethertype"] == KEEPALIVE_ETHERTYPE:
            continue
        t = step.pre_state.t
        if step.detail.in_port == fwcfg.outside_port:
            key = flow_key(parsed.slots, inbound=True)
            if key is None or key not in last_insert:
                continue
            if t - last_insert[key] <= gap:
                out = step.detail.pipeline_out
                dropped = out is None or out[0].drop or not step.detail.m_repl
                if dropped:
                    return Verdict(
                        False, "firewall.false_negative",
                        f"flow refreshed {t - last_insert[key]} ticks ago was dropped", i)
        else:
            key = flow_key(parsed.slots, inbound=False)
            if key is not None:
                last_insert[key] = t
    return OK


DENSEFLOW_CLAUSES = {
    "denseflow.gap": "packet-carrying steps are never more than the gap limit apart",
    "firewall.false_negative": "a recently refreshed flow is never dropped inbound",
}


ALL_CLAUSES = {**CLAUSES, **SAMPLER_CLAUSES, **LANGSEC_CLAUSES,
               **PARSER_CLAUSES, **DENSEFLOW_CLAUSES}
