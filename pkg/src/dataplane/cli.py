"""Command line front end.

Four subcommands:

  sim    run a configured switch over a workload and record the trace
  check  replay a trace decision for decision and verify it
  fmt    match a hex packet against one of the declared formats
  gen    synthesize a workload file

Exit codes: 0 success, 1 a check reported a violation, 2 bad usage or
configuration, 3 the simulated switch hit an engine fault.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from typing import Optional

from . import checker, switch
from .apps import (
    SamplerConfig, app_from_config, initial_switch_state, switch_config,
)
from .engines import PktGenState
from .headers import (
    IP_PROTO_TCP, IP_PROTO_UDP, build_packet, make_intrinsic_meta, make_ipv4,
    make_tcp, make_udp, sampled_packet_format, standard_packet_format,
)
from .packet_format import BitString, TypedValue, match_report

FORMATS = {
    "standard": standard_packet_format,
    "sampled": sampled_packet_format,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="dataplane")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_sim = sub.add_parser("sim", help="run a switch and write a trace")
    p_sim.add_argument("--config", required=True, help="app config JSON file")
    p_sim.add_argument("--input", help="workload file from `gen` (JSON lines)")
    p_sim.add_argument("--steps", type=int, default=1000)
    p_sim.add_argument("--policy", default="fifo-drain",
                       choices=switch.ORACLE_POLICIES,
                       help="decision policy for the nondeterminism oracle")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--trace", help="trace output path (JSON lines)")
    p_sim.add_argument("--drain", action="store_true",
                       help="stop once every queue is empty")

    p_chk = sub.add_parser("check", help="replay and verify a trace")
    p_chk.add_argument("trace", help="trace file written by sim")
    p_chk.add_argument("--config", required=True, help="the config the trace was run with")
    p_chk.add_argument("--spec", default="axioms",
                       help="axioms | sampler[:n] | langsec | denseflow:gap")

    p_fmt = sub.add_parser("fmt", help="match a packet against a format")
    p_fmt.add_argument("format", choices=sorted(FORMATS))
    p_fmt.add_argument("packet", help="hex string, or @file with hex inside")

    p_gen = sub.add_parser("gen", help="synthesize a workload")
    p_gen.add_argument("--profile", default="mixed", choices=("tcp", "udp", "mixed"))
    p_gen.add_argument("--count", type=int, default=100)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--malformed-rate", type=float, default=0.0)
    p_gen.add_argument("--ports", default="1",
                       help="comma separated ingress ports to draw from")
    p_gen.add_argument("--out", help="output path; stdout when omitted")

    args = parser.parse_args(argv)
    try:
        if args.cmd == "sim":
            return cmd_sim(args)
        if args.cmd == "check":
            return cmd_check(args)
        if args.cmd == "fmt":
            return cmd_fmt(args)
        return cmd_gen(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _load_workload(path: str) -> tuple[switch.Arrival, ...]:
    arrivals = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            arrivals.append(switch.Arrival(int(obj["port"]),
                                           BitString.from_json(obj["packet"])))
    return tuple(arrivals)


def cmd_sim(args) -> int:
    bundle = app_from_config(_load_config(args.config))
    cfg = switch_config(bundle)
    st = initial_switch_state(bundle)
    qs = switch.SwitchQueues(q_input=_load_workload(args.input) if args.input else ())
    oracle = switch.make_oracle(args.policy, args.seed)

    stop = None
    if args.drain:
        stop = lambda s, q: (not q.q_input and not q.q_egress
                             and q.p_recirc is None)
    trace = switch.run(cfg, st, qs, args.steps, oracle, stop_when=stop)
    if args.trace:
        switch.write_trace(trace, args.trace)
    print(f"steps={len(trace.steps)} outputs={len(trace.final_queues.q_output)} "
          f"t={trace.final_state.t} fault={trace.fault or 'none'}")
    return 3 if trace.fault else 0


def cmd_check(args) -> int:
    records = switch.read_trace_lines(args.trace)
    if not records or records[0].get("type") != "header":
        print("error: trace has no header record", file=sys.stderr)
        return 2
    header = records[0]
    step_records = [r for r in records if r.get("type") == "step"]
    fault_records = [r for r in records if r.get("type") == "fault"]

    bundle = app_from_config(_load_config(args.config))
    cfg = switch_config(bundle)
    if switch.config_digest(cfg) != header["config_digest"]:
        print("error: config does not match the trace header", file=sys.stderr)
        return 2
    st = switch.SwitchState(t=header["t0"], s_g=PktGenState(),
                            s_i=bundle.init_ingress, s_e=bundle.init_egress)
    if switch.digest(st) != header["state_digest"]:
        print("error: initial state does not match the trace header", file=sys.stderr)
        return 2
    qs = switch.queues_from_header(header)

    decisions = [r["decisions"] for r in step_records]
    if fault_records:
        # the faulting step consumed oracle choices too; replay them so
        # the fault itself is reproduced
        decisions.append(fault_records[0].get("decisions", {}))
    oracle = switch.ReplayOracle(decisions)
    replayed = switch.run(cfg, st, qs, len(decisions), oracle)
    if len(replayed.steps) < len(step_records) and not replayed.fault:
        print("error: replay stopped early", file=sys.stderr)
        return 2

    # the replay must reproduce the recorded file byte for byte
    new_lines = switch.trace_to_lines(replayed)
    old_lines = [json.dumps(r, sort_keys=True, separators=(",", ":"))
                 for r in records]
    if old_lines != new_lines:
        bad = next((i for i, (a, b) in enumerate(zip(old_lines, new_lines))
                    if a != b), min(len(old_lines), len(new_lines)))
        print(f"replay: VIOLATION clause=trace.divergence step={max(bad - 1, 0)}")
        return 1
    print(f"replay: ok ({len(replayed.steps)} steps)")

    verdicts = [("axioms", checker.check_trace(cfg, replayed))]
    name, _, param = args.spec.partition(":")
    if name == "axioms":
        pass
    elif name == "sampler":
        raw = _load_config(args.config)
        known = ("forward_port", "monitor_port", "monitor_group",
                 "sample_every", "forward_rid", "monitor_rid")
        fields = {k: int(raw[k]) for k in known if k in raw}
        if param:
            fields["sample_every"] = int(param)
        scfg = SamplerConfig(**fields)
        verdicts.append(("sampler", checker.sampler_trace_check(replayed, scfg)))
    elif name == "langsec":
        try:
            verdicts.append(("langsec", checker.langsec_trace_check(replayed, cfg)))
        except checker.PreconditionUnmet as e:
            print(f"langsec: precondition unmet ({e})", file=sys.stderr)
            return 2
    elif name == "denseflow":
        if not param:
            print("error: denseflow needs a gap, e.g. denseflow:64", file=sys.stderr)
            return 2
        verdicts.append(("denseflow",
                         checker.dense_flow_check(replayed, int(param))))
    else:
        print(f"error: unknown spec selector {args.spec!r}", file=sys.stderr)
        return 2

    failed = False
    for label, v in verdicts:
        if v.ok:
            print(f"{label}: ok")
        else:
            failed = True
            where = "" if v.step is None else f" step={v.step}"
            print(f"{label}: VIOLATION clause={v.violated_clause}{where} {v.detail}")
    return 1 if failed else 0


def cmd_fmt(args) -> int:
    text = args.packet
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read().strip()
    p = BitString.from_hex(text)
    report = match_report(p, FORMATS[args.format]())
    env = {name: v.as_dict() if isinstance(v, TypedValue) else v.to_json()
           for name, v in report["env"].items()}
    print(json.dumps({**report, "env": env}, sort_keys=True))
    return 0 if report["ok"] else 1


def cmd_gen(args) -> int:
    rng = random.Random(args.seed)
    ports = [int(x) for x in args.ports.split(",") if x]
    if not ports:
        print("error: --ports needs at least one port", file=sys.stderr)
        return 2
    lines = []
    for _ in range(args.count):
        port = rng.choice(ports)
        p = _random_packet(rng, args.profile)
        if rng.random() < args.malformed_rate:
            # cut inside the fixed headers so no parse can succeed
            cut = rng.randrange(1, min(len(p), 240))
            p = p.take(cut)
        lines.append(json.dumps({"port": port, "packet": p.to_json()},
                                sort_keys=True))
    out = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)
    return 0


def _random_packet(rng: random.Random, profile: str) -> BitString:
    proto = {"tcp": IP_PROTO_TCP, "udp": IP_PROTO_UDP}.get(profile)
    if proto is None:
        proto = rng.choice((IP_PROTO_TCP, IP_PROTO_UDP))
    ipv4 = make_ipv4(src=rng.getrandbits(32), dst=rng.getrandbits(32),
                     protocol=proto, id=rng.getrandbits(16))
    if proto == IP_PROTO_TCP:
        l4 = make_tcp(src_port=rng.getrandbits(16), dst_port=rng.getrandbits(16),
                      seq=rng.getrandbits(32))
    else:
        l4 = make_udp(src_port=rng.getrandbits(16), dst_port=rng.getrandbits(16))
    payload = BitString.from_bytes(rng.randbytes(rng.randrange(0, 33)))
    return build_packet(meta=make_intrinsic_meta(), ipv4=ipv4, l4=l4,
                        payload=payload)


if __name__ == "__main__":
    sys.exit(main())
