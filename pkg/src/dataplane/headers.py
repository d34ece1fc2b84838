"""Concrete header layouts and the standard packet shape.

Every packet handled by the stock applications carries, in order: an
8-byte intrinsic metadata block, an 8-byte opaque port metadata block,
Ethernet, IPv4, then TCP or UDP depending on the IPv4 protocol number,
then an arbitrary payload.  Sampled copies additionally carry an
18-byte sample digest in front, recognizable by a sentinel value in
its first 16 bits.
"""

from __future__ import annotations

from .packet_format import (
    BitString, Branch, Concat, Empty, ExactPlain, ExactValue, Format,
    HeaderType, TypedValue, encode, seq,
)

ETHERNET = HeaderType("ethernet", (
    ("dst", 48),
    ("src", 48),
    ("ethertype", 16),
))

IPV4 = HeaderType("ipv4", (
    ("version", 4),
    ("ihl", 4),
    ("dscp_ecn", 8),
    ("total_len", 16),
    ("id", 16),
    ("flags_frag", 16),
    ("ttl", 8),
    ("protocol", 8),
    ("checksum", 16),
    ("src", 32),
    ("dst", 32),
))

TCP = HeaderType("tcp", (
    ("src_port", 16),
    ("dst_port", 16),
    ("seq", 32),
    ("ack", 32),
    ("offset_flags", 16),
    ("window", 16),
    ("checksum", 16),
    ("urgent", 16),
))

UDP = HeaderType("udp", (
    ("src_port", 16),
    ("dst_port", 16),
    ("length", 16),
    ("checksum", 16),
))

INTRINSIC_META = HeaderType("intrinsic_meta", (
    ("ingress_port", 16),
    ("reserved", 48),
))

# the switch never interprets these 8 bytes
PORT_META = HeaderType("port_meta", (("blob", 64),))

SAMPLE_HEADER = HeaderType("sample", (
    ("marker_ethertype", 16),
    ("src_addr", 32),
    ("dst_addr", 32),
    ("src_port", 16),
    ("dst_port", 16),
    ("sample_count", 32),
))

# first 16 bits of a sampled copy; regular packets start with a port
# number below 512, so the two can never collide
SAMPLE_MARKER = 0x9999

IP_PROTO_TCP = 6
IP_PROTO_UDP = 17


def is_tcp(ipv4: TypedValue) -> bool:
    return ipv4["protocol"] == IP_PROTO_TCP


def is_udp(ipv4: TypedValue) -> bool:
    return ipv4["protocol"] == IP_PROTO_UDP


def _l4_branch() -> Format:
    return Branch(
        lambda env: is_tcp(env["ipv4"]),
        ExactValue("tcp", TCP),
        Branch(
            lambda env: is_udp(env["ipv4"]),
            ExactValue("udp", UDP),
            Empty(),
            label="is_udp",
        ),
        label="is_tcp",
    )


def standard_packet_format() -> Format:
    """meta ; port_meta ; ethernet ; ipv4 ; (tcp | udp | nothing) ; payload"""
    return seq(
        ExactValue("meta", INTRINSIC_META),
        ExactValue("port_md", PORT_META),
        ExactValue("ethernet", ETHERNET),
        ExactValue("ipv4", IPV4),
        _l4_branch(),
        ExactPlain("payload"),
    )


def sampled_packet_format() -> Format:
    """Like standard_packet_format with a sample digest prepended."""
    return seq(
        ExactValue("sample", SAMPLE_HEADER),
        ExactValue("meta", INTRINSIC_META),
        ExactValue("port_md", PORT_META),
        ExactValue("ethernet", ETHERNET),
        ExactValue("ipv4", IPV4),
        _l4_branch(),
        ExactPlain("payload"),
    )


# convenience constructors; unspecified fields default to zero

def make_ethernet(**fields: int) -> TypedValue:
    base = {"dst": 0, "src": 0, "ethertype": 0}
    base.update(fields)
    return TypedValue(ETHERNET, base)


def make_ipv4(**fields: int) -> TypedValue:
    base = {"version": 4, "ihl": 5, "dscp_ecn": 0, "total_len": 0, "id": 0,
            "flags_frag": 0, "ttl": 64, "protocol": 0, "checksum": 0,
            "src": 0, "dst": 0}
    base.update(fields)
    return TypedValue(IPV4, base)


def make_tcp(**fields: int) -> TypedValue:
    base = {"src_port": 0, "dst_port": 0, "seq": 0, "ack": 0,
            "offset_flags": 0x5000, "window": 0, "checksum": 0, "urgent": 0}
    base.update(fields)
    return TypedValue(TCP, base)


def make_udp(**fields: int) -> TypedValue:
    base = {"src_port": 0, "dst_port": 0, "length": 8, "checksum": 0}
    base.update(fields)
    return TypedValue(UDP, base)


def make_intrinsic_meta(**fields: int) -> TypedValue:
    base = {"ingress_port": 0, "reserved": 0}
    base.update(fields)
    return TypedValue(INTRINSIC_META, base)


def make_port_meta(blob: int = 0) -> TypedValue:
    return TypedValue(PORT_META, {"blob": blob})


def make_sample(**fields: int) -> TypedValue:
    base = {"marker_ethertype": SAMPLE_MARKER, "src_addr": 0, "dst_addr": 0,
            "src_port": 0, "dst_port": 0, "sample_count": 0}
    base.update(fields)
    return TypedValue(SAMPLE_HEADER, base)


def build_packet(*, meta: TypedValue | None = None,
                 port_md: TypedValue | None = None,
                 ethernet: TypedValue | None = None,
                 ipv4: TypedValue | None = None,
                 l4: TypedValue | None = None,
                 payload: BitString = BitString()) -> BitString:
    """Assemble a full on-the-wire packet in standard layout."""
    parts = [
        encode(meta if meta is not None else make_intrinsic_meta()),
        encode(port_md if port_md is not None else make_port_meta()),
        encode(ethernet if ethernet is not None else make_ethernet()),
        encode(ipv4 if ipv4 is not None else make_ipv4()),
    ]
    if l4 is not None:
        parts.append(encode(l4))
    out = parts[0]
    for piece in parts[1:]:
        out = out + piece
    return out + payload
