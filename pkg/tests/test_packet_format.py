"""Codec and format-language semantics.

Expected wire images are written out by hand from the field tables, and
the production matcher is cross-checked against the brute-force
all-splits matcher in tests/support.py.
"""

import random

import pytest
from hypothesis import given, settings, strategies as st

from dataplane.packet_format import (
    BitString,
    Branch,
    Concat,
    Empty,
    Environment,
    ExactPlain,
    ExactValue,
    ExtractStatus,
    HeaderType,
    IllFormedFormat,
    TypedValue,
    UNBOUNDED,
    UnresolvedCondition,
    advance,
    check_well_formed,
    encode,
    extract,
    format_width,
    match_report,
    matches,
    reconstruct,
    seq,
)
from dataplane.headers import ETHERNET, IPV4, UDP

from support import random_format, ref_matches, sample_matching_input, rand_typed


class TestTypedValue:
    def test_missing_field(self):
        with pytest.raises(ValueError):
            TypedValue(ETHERNET, {"dst": 1, "src": 2})

    def test_extra_field(self):
        with pytest.raises(ValueError):
            TypedValue(UDP, {"src_port": 0, "dst_port": 0, "length": 0,
                             "checksum": 0, "bogus": 1})

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            TypedValue(UDP, {"src_port": 1 << 16, "dst_port": 0,
                             "length": 0, "checksum": 0})

    def test_field_order_irrelevant(self):
        a = TypedValue(ETHERNET, {"dst": 1, "src": 2, "ethertype": 3})
        b = TypedValue(ETHERNET, {"ethertype": 3, "src": 2, "dst": 1})
        assert a == b and encode(a) == encode(b)

    def test_replace(self):
        v = TypedValue(UDP, {"src_port": 1, "dst_port": 2, "length": 8,
                             "checksum": 0})
        w = v.replace(dst_port=9)
        assert w["dst_port"] == 9 and w["src_port"] == 1 and v["dst_port"] == 2


class TestCodec:
    def test_ethernet_wire_image(self):
        # dst=ff:..:ff src=00:..:00 type=0x0800, laid out field by field
        v = TypedValue(ETHERNET, {"dst": 0xFFFF_FFFF_FFFF, "src": 0,
                                  "ethertype": 0x0800})
        assert encode(v).to_bytes() == bytes.fromhex("ffffffffffff" + "0" * 12 + "0800")

    def test_extract_exact(self):
        wire = BitString.from_bytes(bytes.fromhex("ffffffffffff" + "0" * 12 + "0800"))
        v, status, rest = extract(ETHERNET, wire)
        assert status is ExtractStatus.SUCCESS
        assert v["dst"] == 0xFFFF_FFFF_FFFF and v["ethertype"] == 0x800
        assert rest == BitString()

    def test_extract_leaves_remainder(self):
        tail = BitString(0b101, 3)
        v = TypedValue(ETHERNET, {"dst": 5, "src": 6, "ethertype": 7})
        got, status, rest = extract(ETHERNET, encode(v) + tail)
        assert (got, status, rest) == (v, ExtractStatus.SUCCESS, tail)

    def test_extract_short_input(self):
        p = BitString(0, 111)  # one bit shy of an ethernet header
        v, status, rest = extract(ETHERNET, p)
        assert v is None and status is ExtractStatus.FAILURE and rest == p

    @given(st.data())
    @settings(max_examples=300)
    def test_round_trip(self, data):
        htype = data.draw(st.sampled_from([ETHERNET, IPV4, UDP]))
        vals = {n: data.draw(st.integers(0, (1 << w) - 1)) for n, w in htype.fields}
        v = TypedValue(htype, vals)
        tail_len = data.draw(st.integers(0, 24))
        tail = BitString(data.draw(st.integers(0, (1 << tail_len) - 1 if tail_len else 0)),
                         tail_len)
        assert extract(htype, encode(v) + tail) == (v, ExtractStatus.SUCCESS, tail)

    def test_advance(self):
        p = BitString(0b1011, 4)
        assert advance(p, 2) == (ExtractStatus.SUCCESS, BitString(0b11, 2))
        assert advance(p, 5) == (ExtractStatus.FAILURE, p)
        assert advance(p, 4) == (ExtractStatus.SUCCESS, BitString())


H2 = HeaderType("two", (("a", 4), ("b", 4)))


class TestWellFormedness:
    def test_duplicate_binding(self):
        with pytest.raises(IllFormedFormat):
            check_well_formed(seq(ExactValue("x", H2), ExactValue("x", H2)))

    def test_plain_must_be_terminal(self):
        with pytest.raises(IllFormedFormat):
            check_well_formed(Concat(ExactPlain("rest"), ExactValue("x", H2)))

    def test_plain_terminal_ok(self):
        check_well_formed(seq(ExactValue("x", H2), ExactPlain("rest")))

    def test_branch_arms_may_reuse_names(self):
        f = Branch(lambda e: True,
                   ExactValue("y", H2), ExactValue("y", H2))
        check_well_formed(f)
        # but a name used in an arm is burnt for what follows
        with pytest.raises(IllFormedFormat):
            check_well_formed(Concat(f, ExactValue("y", H2)))


class TestMatching:
    def test_exact_value_binds(self):
        p = BitString(0xAB, 8)
        ok, env = matches(p, ExactValue("x", H2))
        assert ok and env["x"]["a"] == 0xA and env["x"]["b"] == 0xB

    def test_trailing_bits_fail(self):
        ok, _ = matches(BitString(0xAB5, 12), ExactValue("x", H2))
        assert not ok

    def test_plain_takes_rest(self):
        f = seq(ExactValue("x", H2), ExactPlain("rest"))
        ok, env = matches(BitString(0xAB5, 12), f)
        assert ok and env["rest"] == BitString(0x5, 4)

    def test_plain_may_be_empty(self):
        ok, env = matches(BitString(0xAB, 8),
                          seq(ExactValue("x", H2), ExactPlain("rest")))
        assert ok and len(env["rest"]) == 0

    def test_branch_selects_arm(self):
        f = Concat(ExactValue("x", H2),
                   Branch(lambda e: e["x"]["a"] == 0xA,
                          ExactValue("then", H2), Empty(), label="is_a"))
        assert matches(BitString(0xAB01, 16), f)[0]
        assert matches(BitString(0xAB, 8), f)[0] is False      # arm demands 8 more
        assert matches(BitString(0x1B, 8), f)[0]               # else-arm is empty

    def test_unbound_condition_raises(self):
        f = Branch(lambda e: e["nope"]["a"] == 0, Empty(), Empty())
        with pytest.raises(UnresolvedCondition):
            matches(BitString(), f)

    def test_environment_missing_name(self):
        with pytest.raises(UnresolvedCondition):
            Environment({})["ghost"]

    def test_against_brute_force(self):
        rng = random.Random(0xF0F0)
        agree = 0
        for _ in range(400):
            f = random_format(rng)
            if rng.random() < 0.5:
                p = sample_matching_input(rng, f)
                if len(p) > 64:
                    p = p.take(64)
            else:
                n = rng.randrange(0, 65)
                p = BitString(rng.getrandbits(n) if n else 0, n)
            got, _ = matches(p, f)
            assert got == ref_matches(p, f), (f, p)
            agree += 1
        assert agree == 400


class TestWidthAndReport:
    def test_fixed_width(self):
        f = seq(ExactValue("x", H2), ExactValue("y", ETHERNET))
        assert format_width(f, Environment()) == 8 + 112

    def test_plain_is_unbounded(self):
        f = seq(ExactValue("x", H2), ExactPlain("p"))
        assert format_width(f, Environment()) is UNBOUNDED

    def test_branch_width_needs_env(self):
        f = Branch(lambda e: e["x"]["a"] == 1, ExactValue("y", H2), Empty())
        x1 = TypedValue(H2, {"a": 1, "b": 0})
        x0 = TypedValue(H2, {"a": 0, "b": 0})
        assert format_width(f, Environment({"x": x1})) == 8
        assert format_width(f, Environment({"x": x0})) == 0
        with pytest.raises(UnresolvedCondition):
            format_width(f, Environment())

    def test_report_blames_start_of_failed_field(self):
        f = seq(ExactValue("x", H2), ExactValue("eth", ETHERNET))
        r = match_report(BitString(0xAB, 8) + BitString(0, 40), f)
        assert not r["ok"]
        assert r["fail_bit"] == 8  # ethernet starts here and cannot fit
        assert "ethernet" in r["reason"]

    def test_report_trailing(self):
        r = match_report(BitString(0xAB5, 12), ExactValue("x", H2))
        assert not r["ok"] and r["fail_bit"] == 8 and "trailing" in r["reason"]

    def test_report_success(self):
        r = match_report(BitString(0xAB, 8), ExactValue("x", H2))
        assert r["ok"] and r["fail_bit"] is None


class TestReconstruct:
    def test_identity_on_random_matches(self):
        rng = random.Random(0xBEEF)
        n_checked = 0
        for _ in range(200):
            f = random_format(rng)
            p = sample_matching_input(rng, f)
            ok, env = matches(p, f)
            if not ok:
                continue  # truncation path never taken here
            assert reconstruct(f, env) == p
            n_checked += 1
        assert n_checked >= 190  # constructed inputs should essentially all match
