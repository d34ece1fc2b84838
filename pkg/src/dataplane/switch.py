"""Whole-switch step machine with oracle-driven nondeterminism.

A switch run interleaves two step kinds.  An ingress step advances the
clock by one tick, lets the packet generator or the input queue supply
at most one packet, and pushes the ingress pipeline's result through
mirroring, replication and queue admission into the egress queue.  An
egress step freezes the clock, schedules one queued copy through the
egress pipeline, and either transmits it or parks it in the
single-slot recirculation register.

Everything an axiom leaves open (step interleaving, which arrival to
take, which copies to admit, which copy to schedule) is asked of an
Oracle, and every answer is recorded in the TraceStep, so any run can
be replayed decision for decision and audited offline.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass
from typing import Callable, Optional

from . import engines
from .engines import (
    EgressMeta, EngineError, McConfig, OracleOutOfRange, PktGenConfig,
    PktGenState, QacAlwaysReady, QacMinimal, mandatory_mask,
)
from .packet_format import BitString
from .pipeline import (
    Components, EgressIndication, EgressParseFailure, MirrorId, TmMeta,
    egress_pipeline, ingress_pipeline,
)

INGRESS = "ingress"
EGRESS = "egress"


class StepNotEnabled(Exception):
    pass


class Deadlock(Exception):
    pass


@dataclass(frozen=True)
class Arrival:
    """One element of the input queue: the wire bits plus the port they
    arrived on."""

    port: int
    packet: BitString


@dataclass(frozen=True)
class SwitchState:
    t: int
    s_g: PktGenState
    s_i: tuple  # (parser, control, deparser) ingress state slots
    s_e: tuple  # same for egress


@dataclass(frozen=True)
class SwitchQueues:
    q_input: tuple[Arrival, ...] = ()
    p_recirc: Optional[BitString] = None
    q_mirror: tuple = ()
    q_egress: tuple = ()  # of (EgressMeta, BitString)
    q_output: tuple = ()  # of (port, BitString)


@dataclass(frozen=True)
class SwitchConfig:
    components: Components
    mc: McConfig
    pktgen: PktGenConfig
    qac: "QacMinimal | QacAlwaysReady"
    mirror: str = engines.EMPTY_MIRROR
    app_label: str = "custom"


def egress_enabled(qs: SwitchQueues) -> bool:
    return qs.p_recirc is None and len(qs.q_egress) > 0


# ---------------------------------------------------------------------------
# oracles


class Oracle:
    """Decision source resolving every relational choice.  Implementations
    must return in-range indices and masks covering the mandatory set."""

    def step_kind(self, state: SwitchState, queues: SwitchQueues) -> str:
        raise NotImplementedError

    def input_index(self, n: int) -> int:
        raise NotImplementedError

    def admitted_subset(self, ms, mandatory) -> tuple[bool, ...]:
        raise NotImplementedError

    def sched_index(self, n: int) -> int:
        raise NotImplementedError


class FifoDrainOracle(Oracle):
    """Deterministic baseline: drain egress first, FIFO everywhere,
    admit everything."""

    def step_kind(self, state, queues):
        return EGRESS if egress_enabled(queues) else INGRESS

    def input_index(self, n):
        return 0

    def admitted_subset(self, ms, mandatory):
        return tuple(True for _ in ms)

    def sched_index(self, n):
        return 0


class RandomOracle(Oracle):
    """Seeded random choices.  With reorder=False the index choices stay
    FIFO while step interleaving and admission remain random; admission
    always covers the mandatory mask."""

    def __init__(self, seed: int, reorder: bool = True, drop_rate: float = 0.3):
        self._rng = random.Random(seed)
        self._reorder = reorder
        self._drop_rate = drop_rate

    def step_kind(self, state, queues):
        return EGRESS if self._rng.random() < 0.5 else INGRESS

    def input_index(self, n):
        return self._rng.randrange(n) if self._reorder else 0

    def admitted_subset(self, ms, mandatory):
        return tuple(must or self._rng.random() >= self._drop_rate
                     for must in mandatory)

    def sched_index(self, n):
        return self._rng.randrange(n) if self._reorder else 0


class AdversarialDropOracle(Oracle):
    """Admits only what the policy forces, drops everything else."""

    def step_kind(self, state, queues):
        return EGRESS if egress_enabled(queues) else INGRESS

    def input_index(self, n):
        return 0

    def admitted_subset(self, ms, mandatory):
        return tuple(mandatory)

    def sched_index(self, n):
        return 0


class ReplayOracle(Oracle):
    """Feeds back the decisions recorded in an earlier trace."""

    def __init__(self, decisions: list[dict]):
        self._decisions = list(decisions)
        self._i = -1

    def _cur(self) -> dict:
        if self._i >= len(self._decisions):
            # surfaces as a fault instead of crashing the replay
            raise OracleOutOfRange("replay ran out of recorded decisions")
        return self._decisions[self._i]

    def step_kind(self, state, queues):
        self._i += 1
        return self._cur()["requested_kind"]

    def input_index(self, n):
        return self._cur()["input_index"]

    def admitted_subset(self, ms, mandatory):
        return tuple(self._cur()["admitted_mask"])

    def sched_index(self, n):
        return self._cur()["sched_index"]


class _SpyOracle(Oracle):
    """Pass-through that logs consultations, so a step that faults midway
    still leaves its decisions behind for replay."""

    def __init__(self, inner: Oracle):
        self._inner = inner
        self.log: dict = {}

    def begin(self) -> None:
        self.log = {}

    def step_kind(self, state, queues):
        kind = self._inner.step_kind(state, queues)
        self.log["requested_kind"] = kind
        return kind

    def input_index(self, n):
        i = self._inner.input_index(n)
        self.log["input_index"] = i
        return i

    def admitted_subset(self, ms, mandatory):
        mask = tuple(self._inner.admitted_subset(ms, mandatory))
        self.log["admitted_mask"] = [bool(b) for b in mask]
        return mask

    def sched_index(self, n):
        i = self._inner.sched_index(n)
        self.log["sched_index"] = i
        return i


ORACLE_POLICIES = ("fifo-drain", "random", "adversarial-drop")


def make_oracle(policy: str, seed: int = 0) -> Oracle:
    if policy == "fifo-drain":
        return FifoDrainOracle()
    if policy == "random":
        return RandomOracle(seed)
    if policy == "adversarial-drop":
        return AdversarialDropOracle()
    raise ValueError(f"unknown oracle policy {policy!r}; pick one of {ORACLE_POLICIES}")


# ---------------------------------------------------------------------------
# trace steps


@dataclass(frozen=True)
class IngressDetail:
    p_g: Optional[BitString]
    from_recirc: bool
    in_port: Optional[int]
    p_i: Optional[BitString]
    pipeline_out: Optional[tuple[TmMeta, MirrorId, EgressIndication, BitString]]
    m_merge: Optional[TmMeta]
    m_repl: Optional[tuple[EgressMeta, ...]]
    enqueued: tuple


@dataclass(frozen=True)
class EgressDetail:
    scheduled: tuple  # (EgressMeta, BitString)
    indication: EgressIndication
    p_out: BitString
    recirculated: bool


@dataclass(frozen=True)
class TraceStep:
    kind: str
    pre_state: SwitchState
    pre_queues: SwitchQueues
    post_state: SwitchState
    post_queues: SwitchQueues
    decisions: dict
    detail: "IngressDetail | EgressDetail"


@dataclass
class Trace:
    config_digest: str
    app_label: str
    initial_state: SwitchState
    initial_queues: SwitchQueues
    steps: list[TraceStep]
    final_state: SwitchState
    final_queues: SwitchQueues
    fault: Optional[str] = None
    # oracle choices consumed by the step that faulted, if any; without
    # them a replay could not reproduce the fault
    fault_decisions: Optional[dict] = None


# ---------------------------------------------------------------------------
# the two step relations


def ingress_step(cfg: SwitchConfig, st: SwitchState, qs: SwitchQueues,
                 o: Oracle) -> tuple[SwitchState, SwitchQueues, TraceStep]:
    """One clock tick of the ingress side.

    Frame: s_e and q_output never change here; t always advances by 1.
    """
    p_g, p_recirc2, s_g2 = engines.packet_generator(cfg.pktgen, st.t, st.s_g, qs.p_recirc)
    from_recirc = qs.p_recirc is not None

    q_input2, in_port, p_i = engines.input_ports(p_g, qs.q_input, o)
    if p_g is not None and in_port is None:
        in_port = cfg.pktgen.source_port

    decisions = {
        "requested_kind": INGRESS,
        "kind": INGRESS,
        "input_index": None,
        "admitted_mask": None,
        "sched_index": None,
    }
    if p_g is None and p_i is not None:
        # recover the oracle's pick for the record; input_ports consumed it
        decisions["input_index"] = _locate_removed(qs.q_input, q_input2)

    s_i2 = st.s_i
    out = None
    m_merge = None
    m_repl = None
    enqueued: tuple = ()
    q_mirror2 = qs.q_mirror
    q_egress2 = qs.q_egress

    if p_i is not None:
        out, s_i2 = ingress_pipeline(cfg.components, st.t, in_port, p_i, st.s_i)
        if out is not None:
            tm, mirror_id, _m3, raw_out = out
            m_mirror = engines.mirror_session_lookup(cfg.mirror, mirror_id)
            m_merge, q_mirror2 = engines.mirror_buffer_merge(tm, m_mirror, qs.q_mirror)
            m_repl = tuple(engines.replication_engine(cfg.mc, m_merge))
            q_egress2, mask = engines.queue_admission(m_repl, raw_out, qs.q_egress,
                                                      cfg.qac, o)
            decisions["admitted_mask"] = list(mask)
            enqueued = q_egress2[len(qs.q_egress):]

    st2 = SwitchState(t=st.t + 1, s_g=s_g2, s_i=s_i2, s_e=st.s_e)
    qs2 = SwitchQueues(q_input=q_input2, p_recirc=p_recirc2, q_mirror=q_mirror2,
                       q_egress=q_egress2, q_output=qs.q_output)
    step = TraceStep(INGRESS, st, qs, st2, qs2, decisions,
                     IngressDetail(p_g=p_g, from_recirc=from_recirc, in_port=in_port,
                                   p_i=p_i, pipeline_out=out, m_merge=m_merge,
                                   m_repl=m_repl, enqueued=enqueued))
    return st2, qs2, step


def _locate_removed(before: tuple, after: tuple) -> int:
    for i in range(len(after) + 1):
        if before[:i] == after[:i] and before[i + 1:] == after[i:]:
            return i
    raise AssertionError("no single-element removal found")


def egress_step(cfg: SwitchConfig, st: SwitchState, qs: SwitchQueues,
                o: Oracle) -> tuple[SwitchState, SwitchQueues, TraceStep]:
    """Schedule one queued copy through the egress pipeline.

    Frame: t, s_g, s_i, q_input and q_mirror never change here.  Not
    enabled while the recirculation register is occupied.
    """
    if qs.p_recirc is not None:
        raise StepNotEnabled("recirculation register occupied")
    picked = engines.packet_scheduler(qs.q_egress, o)
    if picked is None:
        raise StepNotEnabled("egress queue empty")
    q_egress2, (em, p_e), idx = picked

    (ind, p_out), s_e2 = egress_pipeline(cfg.components, em, p_e, st.s_e)
    q_output2, p_recirc2 = engines.output_ports(qs.q_output, ind, em.egress_port, p_out)

    decisions = {
        "requested_kind": EGRESS,
        "kind": EGRESS,
        "input_index": None,
        "admitted_mask": None,
        "sched_index": idx,
    }
    st2 = SwitchState(t=st.t, s_g=st.s_g, s_i=st.s_i, s_e=s_e2)
    qs2 = SwitchQueues(q_input=qs.q_input, p_recirc=p_recirc2, q_mirror=qs.q_mirror,
                       q_egress=q_egress2, q_output=q_output2)
    step = TraceStep(EGRESS, st, qs, st2, qs2, decisions,
                     EgressDetail(scheduled=(em, p_e), indication=ind, p_out=p_out,
                                  recirculated=p_recirc2 is not None))
    return st2, qs2, step


def process_packet(cfg: SwitchConfig, st: SwitchState, qs: SwitchQueues,
                   o: Oracle) -> tuple[SwitchState, SwitchQueues, TraceStep]:
    """Take one oracle-chosen enabled step.  An egress request while
    egress is not enabled falls back to ingress and is recorded as
    such; ingress is always enabled."""
    requested = o.step_kind(st, qs)
    if requested == EGRESS and egress_enabled(qs):
        return egress_step(cfg, st, qs, o)
    st2, qs2, step = ingress_step(cfg, st, qs, o)
    if requested != INGRESS:
        decisions = dict(step.decisions)
        decisions["requested_kind"] = requested
        step = dataclasses.replace(step, decisions=decisions)
    return st2, qs2, step


def run(cfg: SwitchConfig, init_state: SwitchState, init_queues: SwitchQueues,
        n_steps: int, o: Oracle,
        stop_when: Optional[Callable[[SwitchState, SwitchQueues], bool]] = None
        ) -> Trace:
    """Iterate process_packet up to n_steps times.

    Stops early when stop_when(state, queues) turns true.  An engine
    error aborts the run; the partial trace is kept and the fault
    stored on the returned Trace.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    st, qs = init_state, init_queues
    steps: list[TraceStep] = []
    fault = None
    fault_decisions = None
    spy = _SpyOracle(o)
    for _ in range(n_steps):
        if stop_when is not None and stop_when(st, qs):
            break
        spy.begin()
        try:
            st, qs, step = process_packet(cfg, st, qs, spy)
        except (EngineError, EgressParseFailure) as e:
            fault = f"{type(e).__name__}: {e}"
            fault_decisions = spy.log
            break
        steps.append(step)
    return Trace(config_digest=config_digest(cfg), app_label=cfg.app_label,
                 initial_state=init_state, initial_queues=init_queues,
                 steps=steps, final_state=st, final_queues=qs, fault=fault,
                 fault_decisions=fault_decisions)


# ---------------------------------------------------------------------------
# canonical encoding and digests


def _canon(obj):
    """Deterministic JSON-compatible view of states, queues and engine
    values, used for digests and trace serialization."""
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, BitString):
        return {"hex": obj.to_hex(), "len_bits": obj.nbits}
    if isinstance(obj, (tuple, list)):
        return [_canon(x) for x in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_canon(x) for x in obj)
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if dataclasses.is_dataclass(obj):
        return {"__kind": type(obj).__name__,
                **{f.name: _canon(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
    raise TypeError(f"cannot canonicalize {type(obj).__name__}")


def digest(obj) -> str:
    blob = json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_digest(cfg: SwitchConfig) -> str:
    view = {"app": cfg.app_label, "mirror": cfg.mirror,
            "mc": cfg.mc.to_json(), "pktgen": cfg.pktgen.to_json(),
            "qac": engines.qac_policy_to_json(cfg.qac)}
    return hashlib.sha256(json.dumps(view, sort_keys=True).encode()).hexdigest()[:16]


def state_digests(st: SwitchState) -> dict:
    return {
        "t": st.t,
        "s_g": digest(st.s_g),
        "s_ip": digest(st.s_i[0]), "s_ic": digest(st.s_i[1]), "s_id": digest(st.s_i[2]),
        "s_ep": digest(st.s_e[0]), "s_ec": digest(st.s_e[1]), "s_ed": digest(st.s_e[2]),
    }


def queue_digests(qs: SwitchQueues) -> dict:
    return {
        "q_input": digest(qs.q_input),
        "p_recirc": None if qs.p_recirc is None else qs.p_recirc.to_hex(),
        "q_mirror": digest(qs.q_mirror),
        "q_egress": digest(qs.q_egress),
        "q_output": digest(qs.q_output),
        "lens": [len(qs.q_input), len(qs.q_egress), len(qs.q_output)],
    }


# ---------------------------------------------------------------------------
# trace file format: one JSON object per line


def _opt_hex(p: Optional[BitString]):
    return None if p is None else p.to_json()


def _em_json(em: EgressMeta) -> dict:
    return {"port": em.egress_port, "rid": em.rid, "source": em.source}


def step_to_json(step: TraceStep) -> dict:
    rec = {
        "type": "step",
        "kind": step.kind,
        "decisions": _canon(step.decisions),
        "pre": {**state_digests(step.pre_state), **queue_digests(step.pre_queues)},
        "post": {**state_digests(step.post_state), **queue_digests(step.post_queues)},
    }
    d = step.detail
    if step.kind == INGRESS:
        rec["detail"] = {
            "p_g": _opt_hex(d.p_g),
            "from_recirc": d.from_recirc,
            "in_port": d.in_port,
            "p_i": _opt_hex(d.p_i),
            "parsed": d.pipeline_out is not None,
            "enqueued": [[_em_json(em), p.to_json()] for em, p in d.enqueued],
        }
        if d.pipeline_out is not None:
            tm, mirror_id, m3, raw_out = d.pipeline_out
            rec["detail"]["tm_meta"] = _canon(tm)
            rec["detail"]["mirror_session"] = mirror_id.session
            rec["detail"]["recirc_flag"] = m3.recirculate
            rec["detail"]["raw_out"] = raw_out.to_json()
            rec["detail"]["m_repl"] = [_em_json(em) for em in d.m_repl]
    else:
        em, p_e = d.scheduled
        rec["detail"] = {
            "scheduled": [_em_json(em), p_e.to_json()],
            "recirculate": d.indication.recirculate,
            "p_out": d.p_out.to_json(),
        }
    return rec


def trace_header_json(trace: Trace) -> dict:
    return {
        "type": "header",
        "config_digest": trace.config_digest,
        "app": trace.app_label,
        "state_digest": digest(trace.initial_state),
        "t0": trace.initial_state.t,
        "queues": {
            "q_input": [[a.port, a.packet.to_json()] for a in trace.initial_queues.q_input],
            "p_recirc": _opt_hex(trace.initial_queues.p_recirc),
            "q_mirror": [],
            "q_egress": [[_em_json(em), p.to_json()] for em, p in trace.initial_queues.q_egress],
            "q_output": [[port, p.to_json()] for port, p in trace.initial_queues.q_output],
        },
    }


def trace_to_lines(trace: Trace) -> list[str]:
    dump = lambda obj: json.dumps(obj, sort_keys=True, separators=(",", ":"))
    lines = [dump(trace_header_json(trace))]
    lines.extend(dump(step_to_json(s)) for s in trace.steps)
    if trace.fault is not None:
        lines.append(dump({"type": "fault", "error": trace.fault,
                           "decisions": trace.fault_decisions or {}}))
    lines.append(dump({"type": "end",
                       "steps": len(trace.steps),
                       "final_state_digest": digest(trace.final_state),
                       "outputs": len(trace.final_queues.q_output)}))
    return lines


def write_trace(trace: Trace, path: str) -> None:
    with open(path, "w") as fh:
        for line in trace_to_lines(trace):
            fh.write(line + "\n")


def read_trace_lines(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def queues_from_header(header: dict) -> SwitchQueues:
    q = header["queues"]
    return SwitchQueues(
        q_input=tuple(Arrival(port, BitString.from_json(h)) for port, h in q["q_input"]),
        p_recirc=None if q["p_recirc"] is None else BitString.from_json(q["p_recirc"]),
        q_mirror=(),
        q_egress=tuple((EgressMeta(em["port"], em["rid"], em["source"]),
                        BitString.from_json(p)) for em, p in q["q_egress"]),
        q_output=tuple((port, BitString.from_json(p)) for port, p in q["q_output"]),
    )
