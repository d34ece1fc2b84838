"""Configurable traffic manager engines.

Each function here is one block between the two pipelines: packet
generation, input ports, mirroring (empty-config regime only),
replication, queue admission, scheduling, and output ports.  They are
pure: queues and states come in as values and updated copies go out.
Where the underlying hardware behavior is nondeterministic (which
queued element to take, which copies to admit) the choice is delegated
to an oracle object owned by the caller, so a run can be replayed
decision for decision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

from .packet_format import BitString
from .pipeline import EgressIndication, MirrorId, TmMeta


class EngineError(Exception):
    pass


class UnknownGroup(EngineError):
    pass


class UnknownLag(EngineError):
    pass


class UnsupportedConfig(EngineError):
    pass


class OracleOutOfRange(EngineError):
    pass


class PolicyViolation(EngineError):
    pass


# ---------------------------------------------------------------------------
# replication: multicast tree walk + unicast

UNICAST = "unicast"
MULTICAST_A = "multicast_a"
MULTICAST_B = "multicast_b"
CPU_COPY = "cpu_copy"


@dataclass(frozen=True)
class L1Node:
    dev_port_list: tuple[int, ...] = ()
    lag_list: tuple[int, ...] = ()
    l1_xid_valid: bool = False
    l1_xid: int = 0
    rid: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dev_port_list", tuple(self.dev_port_list))
        object.__setattr__(self, "lag_list", tuple(self.lag_list))
        for p in self.dev_port_list:
            _check_port(p)
        if not 0 <= self.l1_xid < (1 << 16):
            raise ValueError(f"l1_xid out of 16-bit range: {self.l1_xid}")
        if not 0 <= self.rid < (1 << 16):
            raise ValueError(f"rid out of 16-bit range: {self.rid}")


def _check_port(p: int) -> None:
    if not 0 <= p < 512:
        raise ValueError(f"port out of 9-bit range: {p}")


@dataclass(frozen=True)
class McConfig:
    groups: tuple[tuple[int, tuple[L1Node, ...]], ...] = ()
    lags: tuple[tuple[int, tuple[int, ...]], ...] = ()
    l2_exclusion: tuple[tuple[int, frozenset[int]], ...] = ()
    cpu_port: int = 64

    def __init__(self, groups=None, lags=None, l2_exclusion=None, cpu_port: int = 64):
        groups = dict(groups or {})
        lags = dict(lags or {})
        l2 = dict(l2_exclusion or {})
        for gid in groups:
            if not 0 < gid < (1 << 16):
                raise ValueError(f"group id out of range: {gid}")
        for lag_id, members in lags.items():
            if not members:
                raise ValueError(f"lag {lag_id} has no members")
            for p in members:
                _check_port(p)
        _check_port(cpu_port)
        object.__setattr__(self, "groups",
                           tuple(sorted((g, tuple(ns)) for g, ns in groups.items())))
        object.__setattr__(self, "lags",
                           tuple(sorted((l, tuple(ms)) for l, ms in lags.items())))
        object.__setattr__(self, "l2_exclusion",
                           tuple(sorted((x, frozenset(ps)) for x, ps in l2.items())))
        object.__setattr__(self, "cpu_port", cpu_port)

    def group(self, gid: int) -> Optional[tuple[L1Node, ...]]:
        for g, nodes in self.groups:
            if g == gid:
                return nodes
        return None

    def lag_members(self, lag_id: int) -> Optional[tuple[int, ...]]:
        for l, members in self.lags:
            if l == lag_id:
                return members
        return None

    def excluded_ports(self, xid: int) -> frozenset[int]:
        for x, ports in self.l2_exclusion:
            if x == xid:
                return ports
        return frozenset()

    def to_json(self) -> dict:
        return {
            "groups": {str(g): [{"dev_port_list": list(n.dev_port_list),
                                 "lag_list": list(n.lag_list),
                                 "l1_xid_valid": n.l1_xid_valid,
                                 "l1_xid": n.l1_xid,
                                 "rid": n.rid} for n in nodes]
                       for g, nodes in self.groups},
            "lags": {str(l): list(ms) for l, ms in self.lags},
            "l2_exclusion": {str(x): sorted(ps) for x, ps in self.l2_exclusion},
            "cpu_port": self.cpu_port,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "McConfig":
        groups = {int(g): tuple(L1Node(dev_port_list=tuple(n.get("dev_port_list", ())),
                                       lag_list=tuple(n.get("lag_list", ())),
                                       l1_xid_valid=bool(n.get("l1_xid_valid", False)),
                                       l1_xid=int(n.get("l1_xid", 0)),
                                       rid=int(n.get("rid", 0)))
                                for n in nodes)
                  for g, nodes in obj.get("groups", {}).items()}
        lags = {int(l): tuple(ms) for l, ms in obj.get("lags", {}).items()}
        l2 = {int(x): frozenset(ps) for x, ps in obj.get("l2_exclusion", {}).items()}
        return cls(groups=groups, lags=lags, l2_exclusion=l2,
                   cpu_port=int(obj.get("cpu_port", 64)))


@dataclass(frozen=True)
class EgressMeta:
    egress_port: int
    rid: int
    source: str  # UNICAST, MULTICAST_A, MULTICAST_B or CPU_COPY

    def __post_init__(self) -> None:
        _check_port(self.egress_port)
        if self.source not in (UNICAST, MULTICAST_A, MULTICAST_B, CPU_COPY):
            raise ValueError(f"bad copy source: {self.source!r}")


def resolve_lag(c: McConfig, lag_id: int, m: TmMeta) -> int:
    """Deterministic member pick:
    index = (level1_exclusion_id + rid + lag_id) mod member count."""
    members = c.lag_members(lag_id)
    if members is None:
        raise UnknownLag(f"lag {lag_id} not configured")
    idx = (m.level1_exclusion_id + m.rid + lag_id) % len(members)
    return members[idx]


def multicast_engine(c: McConfig, m: TmMeta) -> list[EgressMeta]:
    """Walk the two-level group tree for both group ids.

    Level-1 nodes are pruned when their exclusion id matches the
    packet's; level-2 prunes individual ports via the exclusion table.
    A drop-marked packet produces no copies at all.
    """
    if m.drop:
        return []
    out: list[EgressMeta] = []
    excluded = c.excluded_ports(m.level2_exclusion_id)
    for gid, source in ((m.mcast_grp_a, MULTICAST_A), (m.mcast_grp_b, MULTICAST_B)):
        if gid == 0:
            continue
        nodes = c.group(gid)
        if nodes is None:
            raise UnknownGroup(f"multicast group {gid} not configured")
        for node in nodes:
            if node.l1_xid_valid and node.l1_xid == m.level1_exclusion_id:
                continue
            for port in node.dev_port_list:
                if port not in excluded:
                    out.append(EgressMeta(port, node.rid, source))
            for lag_id in node.lag_list:
                port = resolve_lag(c, lag_id, m)
                if port not in excluded:
                    out.append(EgressMeta(port, node.rid, source))
    if m.copy_to_cpu:
        out.append(EgressMeta(c.cpu_port, 0, CPU_COPY))
    return out


def unicast_engine(m: TmMeta) -> Optional[EgressMeta]:
    if m.ucast_egress_port is None or m.drop:
        return None
    return EgressMeta(m.ucast_egress_port, m.rid, UNICAST)


def replication_engine(c: McConfig, m: TmMeta) -> list[EgressMeta]:
    """Multicast copies first, the unicast copy last."""
    out = multicast_engine(c, m)
    u = unicast_engine(m)
    if u is not None:
        out.append(u)
    return out


# ---------------------------------------------------------------------------
# packet generation and recirculation intake

IDLE = "idle"
EMITTING = "emitting"


@dataclass(frozen=True)
class PktGenConfig:
    enabled: bool = False
    period: int = 1000
    batch_count: int = 1
    pkts_per_batch: int = 1
    inter_batch_gap: int = 1
    inter_pkt_gap: int = 1
    template: BitString = BitString()
    source_port: int = 68

    def __post_init__(self) -> None:
        _check_port(self.source_port)
        for name in ("period", "batch_count", "pkts_per_batch",
                     "inter_batch_gap", "inter_pkt_gap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enabled and self.period == 1:
            # legal but degenerate; the period is meant to be much larger
            warnings.warn("pktgen period of 1 tick fires continuously", stacklevel=2)

    def to_json(self) -> dict:
        return {"enabled": self.enabled, "period": self.period,
                "batch_count": self.batch_count, "pkts_per_batch": self.pkts_per_batch,
                "inter_batch_gap": self.inter_batch_gap, "inter_pkt_gap": self.inter_pkt_gap,
                "template": self.template.to_json(), "source_port": self.source_port}

    @classmethod
    def from_json(cls, obj: dict) -> "PktGenConfig":
        return cls(enabled=bool(obj.get("enabled", False)),
                   period=int(obj.get("period", 1000)),
                   batch_count=int(obj.get("batch_count", 1)),
                   pkts_per_batch=int(obj.get("pkts_per_batch", 1)),
                   inter_batch_gap=int(obj.get("inter_batch_gap", 1)),
                   inter_pkt_gap=int(obj.get("inter_pkt_gap", 1)),
                   template=BitString.from_json(obj.get("template", "")),
                   source_port=int(obj.get("source_port", 68)))


@dataclass(frozen=True)
class PktGenState:
    phase: str = IDLE
    next_fire: int = 0
    batch_idx: int = 0
    pkt_idx: int = 0

    def __post_init__(self) -> None:
        if self.phase not in (IDLE, EMITTING):
            raise ValueError(f"bad pktgen phase: {self.phase!r}")
        if self.phase == IDLE and (self.batch_idx or self.pkt_idx):
            raise ValueError("idle state must have zero batch/pkt indices")


def _after_emit(c: PktGenConfig, t: int, batch_idx: int, pkt_idx: int) -> PktGenState:
    # pkt_idx counts packets already emitted in the current batch
    if pkt_idx < c.pkts_per_batch:
        return PktGenState(EMITTING, t + c.inter_pkt_gap, batch_idx, pkt_idx)
    if batch_idx + 1 < c.batch_count:
        return PktGenState(EMITTING, t + c.inter_batch_gap, batch_idx + 1, 0)
    return PktGenState(IDLE)


def pktgen_tick(c: PktGenConfig, t: int, s: PktGenState) -> tuple[Optional[BitString], PktGenState]:
    """One tick of the periodic generator.

    A burst starts whenever the generator is idle at a period boundary.
    Within a batch, packets are inter_pkt_gap apart; the next batch
    starts inter_batch_gap after the last packet of the previous one.
    """
    if not c.enabled:
        return None, s
    if s.phase == IDLE:
        if t % c.period == 0:
            return c.template, _after_emit(c, t, 0, 1)
        return None, s
    if t == s.next_fire:
        return c.template, _after_emit(c, t, s.batch_idx, s.pkt_idx + 1)
    return None, s


def packet_generator(c: PktGenConfig, t: int, s: PktGenState,
                     p_recirc: Optional[BitString]
                     ) -> tuple[Optional[BitString], Optional[BitString], PktGenState]:
    """Recirculated packets preempt generation and drain the register;
    otherwise this is pktgen_tick with the register left empty."""
    if p_recirc is not None:
        return p_recirc, None, s
    p_g, s2 = pktgen_tick(c, t, s)
    return p_g, None, s2


# ---------------------------------------------------------------------------
# input ports


def input_ports(p_g: Optional[BitString], q_input: tuple, oracle
                ) -> tuple[tuple, Optional[int], Optional[BitString]]:
    """Hand one packet to the ingress pipeline.

    A generated/recirculated packet takes precedence and leaves the
    queue alone.  Otherwise the oracle picks any queued arrival, not
    necessarily the oldest.  Returns (q', arrival port, packet).
    """
    if p_g is not None:
        return q_input, None, p_g
    if not q_input:
        return q_input, None, None
    idx = oracle.input_index(len(q_input))
    if not 0 <= idx < len(q_input):
        raise OracleOutOfRange(f"input index {idx} for queue of {len(q_input)}")
    rec = q_input[idx]
    return q_input[:idx] + q_input[idx + 1:], rec.port, rec.packet


# ---------------------------------------------------------------------------
# mirroring (only the empty configuration is supported)

EMPTY_MIRROR = "empty"


def mirror_session_lookup(c_mirror: str, mid: MirrorId) -> None:
    if c_mirror != EMPTY_MIRROR:
        raise UnsupportedConfig(f"mirror config {c_mirror!r}; only {EMPTY_MIRROR!r} is modeled")
    return None


def mirror_buffer_merge(m_normal: TmMeta, m_mirror, q_mirror: tuple
                        ) -> tuple[TmMeta, tuple]:
    if m_mirror is not None or q_mirror:
        raise UnsupportedConfig("mirror buffer must stay empty in the supported regime")
    return m_normal, ()


# ---------------------------------------------------------------------------
# queue admission control


@dataclass(frozen=True)
class QacMinimal:
    """Admission may drop any subset; queued packets are never lost."""

    kind: str = "minimal"


@dataclass(frozen=True)
class QacAlwaysReady:
    """Copies destined to ready ports must be admitted.
    ready_ports=None means every port is ready."""

    ready_ports: Optional[frozenset[int]] = None
    kind: str = "always_ready"

    def __post_init__(self) -> None:
        if self.ready_ports is not None:
            object.__setattr__(self, "ready_ports", frozenset(self.ready_ports))

    def is_ready(self, port: int) -> bool:
        return self.ready_ports is None or port in self.ready_ports


def qac_policy_from_json(obj) -> "QacMinimal | QacAlwaysReady":
    if obj is None or obj == "minimal" or obj == {"kind": "minimal"}:
        return QacMinimal()
    if isinstance(obj, dict) and obj.get("kind") == "always_ready":
        ready = obj.get("ready_ports", "all")
        return QacAlwaysReady(None if ready == "all" else frozenset(int(p) for p in ready))
    raise ValueError(f"bad qac_policy: {obj!r}")


def qac_policy_to_json(policy) -> dict:
    if isinstance(policy, QacMinimal):
        return {"kind": "minimal"}
    ready = "all" if policy.ready_ports is None else sorted(policy.ready_ports)
    return {"kind": "always_ready", "ready_ports": ready}


def mandatory_mask(policy, ms: Sequence[EgressMeta]) -> tuple[bool, ...]:
    """Which copies the policy forbids dropping."""
    if isinstance(policy, QacAlwaysReady):
        return tuple(policy.is_ready(m.egress_port) for m in ms)
    return tuple(False for _ in ms)


def queue_admission(ms: Sequence[EgressMeta], p: BitString, q_egress: tuple,
                    policy, oracle) -> tuple[tuple, tuple[bool, ...]]:
    """Append an oracle-chosen subsequence of the replicated copies.

    Returns (q', admitted mask).  The pre-existing queue is always a
    prefix of the result.  Under an always-ready policy an oracle that
    tries to drop a ready-port copy is a contract violation.
    """
    ms = list(ms)
    if not ms:
        return q_egress, ()
    mandatory = mandatory_mask(policy, ms)
    mask = tuple(bool(b) for b in oracle.admitted_subset(tuple(ms), mandatory))
    if len(mask) != len(ms):
        raise OracleOutOfRange(f"admission mask length {len(mask)} for {len(ms)} copies")
    for keep, must in zip(mask, mandatory):
        if must and not keep:
            raise PolicyViolation("oracle dropped a copy destined to an always-ready port")
    admitted = tuple((m, p) for m, keep in zip(ms, mask) if keep)
    return q_egress + admitted, mask


# ---------------------------------------------------------------------------
# packet scheduler and output ports


def packet_scheduler(q_egress: tuple, oracle):
    """Pull any one element out of the egress bag; None when empty."""
    if not q_egress:
        return None
    idx = oracle.sched_index(len(q_egress))
    if not 0 <= idx < len(q_egress):
        raise OracleOutOfRange(f"sched index {idx} for queue of {len(q_egress)}")
    return q_egress[:idx] + q_egress[idx + 1:], q_egress[idx], idx


def output_ports(q_output: tuple, ind: EgressIndication, port: int,
                 p_e: BitString) -> tuple[tuple, Optional[BitString]]:
    """Transmit or recirculate one egress result."""
    if ind.recirculate:
        return q_output, p_e
    return q_output + ((port, p_e),), None
