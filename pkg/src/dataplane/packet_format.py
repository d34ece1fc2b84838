"""Bit-exact packet data and declarative packet formats.

A packet is a finite bit string, MSB-first within each byte.  Header
layouts are described by :class:`HeaderType` (named fields with fixed
bit widths) and concrete header values by :class:`TypedValue`.  Encoding
packs field values big-endian in declaration order; decoding is its
exact inverse, so ``decode(encode(v)) == v`` for every well-typed value.

Packet shapes beyond a single header are described by a small format
language:

* ``Empty``            matches only the empty bit string
* ``ExactValue(n, T)`` matches exactly ``T.total_width`` bits and binds
  the decoded value to ``n``
* ``ExactPlain(n)``    matches any remaining suffix and binds the raw
  bits to ``n`` (only allowed in terminal position)
* ``Concat(f1, f2)``   splits the input at the width of ``f1``
* ``Branch(c, f1, f2)`` picks an arm by evaluating a host predicate
  over the bindings accumulated so far

Matching proceeds left to right, so a branch condition may only read
names bound to its left.  Because every non-terminal piece has an
environment-determined width, the concat split point is forced and
matching is deterministic.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional


class FormatError(Exception):
    """Base class for packet format errors."""


class IllFormedFormat(FormatError):
    """Format violates a structural rule (duplicate binding, non-terminal
    ExactPlain, or a concat left operand without a determined width)."""


class UnresolvedCondition(FormatError):
    """A branch condition read a name that is not bound yet."""


# ---------------------------------------------------------------------------
# bit strings


@dataclass(frozen=True)
class BitString:
    """An immutable bit string stored as (value, nbits), MSB first.

    The first bit of the string is the most significant bit of
    ``value``; an empty string is ``BitString(0, 0)``.
    """

    value: int = 0
    nbits: int = 0

    def __post_init__(self) -> None:
        if self.nbits < 0:
            raise ValueError(f"negative bit length: {self.nbits}")
        if not 0 <= self.value < (1 << self.nbits):
            raise ValueError(f"value {self.value:#x} does not fit in {self.nbits} bits")

    def __len__(self) -> int:
        return self.nbits

    def __add__(self, other: "BitString") -> "BitString":
        return BitString((self.value << other.nbits) | other.value,
                         self.nbits + other.nbits)

    def take(self, n: int) -> "BitString":
        """First n bits."""
        if not 0 <= n <= self.nbits:
            raise ValueError(f"cannot take {n} of {self.nbits} bits")
        return BitString(self.value >> (self.nbits - n), n)

    def drop(self, n: int) -> "BitString":
        """Everything after the first n bits."""
        if not 0 <= n <= self.nbits:
            raise ValueError(f"cannot drop {n} of {self.nbits} bits")
        rem = self.nbits - n
        return BitString(self.value & ((1 << rem) - 1), rem)

    def slice(self, start: int, width: int) -> "BitString":
        """Width bits beginning at bit offset start."""
        if start < 0 or width < 0 or start + width > self.nbits:
            raise ValueError(f"slice [{start}, {start + width}) out of {self.nbits} bits")
        shift = self.nbits - start - width
        return BitString((self.value >> shift) & ((1 << width) - 1), width)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitString":
        return cls(int.from_bytes(data, "big"), 8 * len(data))

    def to_bytes(self) -> bytes:
        if self.nbits % 8:
            raise ValueError(f"{self.nbits} bits is not byte aligned")
        return self.value.to_bytes(self.nbits // 8, "big")

    @classmethod
    def from_hex(cls, text: str, len_bits: Optional[int] = None) -> "BitString":
        """Parse lowercase/uppercase hex; len_bits trims tail padding."""
        text = text.strip()
        if len(text) % 2:
            raise ValueError(f"odd hex digit count: {text!r}")
        raw = cls.from_bytes(bytes.fromhex(text)) if text else cls()
        if len_bits is None:
            return raw
        if not raw.nbits - 8 < len_bits <= raw.nbits:
            raise ValueError(f"len_bits {len_bits} inconsistent with {raw.nbits} hex bits")
        return raw.take(len_bits)

    def to_hex(self) -> str:
        """Hex with the tail zero-padded out to a byte boundary."""
        nbytes = (self.nbits + 7) // 8
        return (self.value << (8 * nbytes - self.nbits)).to_bytes(nbytes, "big").hex()

    def to_json(self):
        """Plain hex string when byte aligned, else {"hex", "len_bits"}."""
        if self.nbits % 8 == 0:
            return self.to_hex()
        return {"hex": self.to_hex(), "len_bits": self.nbits}

    @classmethod
    def from_json(cls, obj) -> "BitString":
        if isinstance(obj, str):
            return cls.from_hex(obj)
        return cls.from_hex(obj["hex"], obj["len_bits"])

    def __repr__(self) -> str:
        return f"BitString({self.nbits}b:{self.to_hex()})"


EMPTY_BITS = BitString()


# ---------------------------------------------------------------------------
# header types and values


@dataclass(frozen=True)
class HeaderType:
    """A named, ordered list of fixed-width unsigned fields."""

    name: str
    fields: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple((str(n), int(w)) for n, w in self.fields))
        seen = set()
        for fname, width in self.fields:
            if width < 1:
                raise ValueError(f"{self.name}.{fname}: width must be >= 1, got {width}")
            if fname in seen:
                raise ValueError(f"{self.name}: duplicate field {fname!r}")
            seen.add(fname)

    @property
    def total_width(self) -> int:
        return sum(w for _, w in self.fields)

    def width_of(self, fname: str) -> int:
        for n, w in self.fields:
            if n == fname:
                return w
        raise KeyError(f"{self.name} has no field {fname!r}")

    def to_json(self) -> dict:
        return {"name": self.name,
                "fields": [{"name": n, "width_bits": w} for n, w in self.fields]}

    @classmethod
    def from_json(cls, obj: dict) -> "HeaderType":
        return cls(obj["name"],
                   tuple((f["name"], f["width_bits"]) for f in obj["fields"]))


@dataclass(frozen=True)
class TypedValue:
    """A fully bound header value.  Every field of the type is present
    and in range; field order is normalized to declaration order."""

    htype: HeaderType
    values: tuple[tuple[str, int], ...]

    def __init__(self, htype: HeaderType, values: Mapping[str, int]) -> None:
        object.__setattr__(self, "htype", htype)
        got = dict(values)
        norm = []
        for fname, width in htype.fields:
            if fname not in got:
                raise ValueError(f"{htype.name}: missing field {fname!r}")
            v = int(got.pop(fname))
            if not 0 <= v < (1 << width):
                raise ValueError(f"{htype.name}.{fname}: {v:#x} does not fit in {width} bits")
            norm.append((fname, v))
        if got:
            raise ValueError(f"{htype.name}: unknown fields {sorted(got)}")
        object.__setattr__(self, "values", tuple(norm))

    def __getitem__(self, fname: str) -> int:
        for n, v in self.values:
            if n == fname:
                return v
        raise KeyError(f"{self.htype.name} has no field {fname!r}")

    def as_dict(self) -> dict[str, int]:
        return dict(self.values)

    def replace(self, **changes: int) -> "TypedValue":
        d = self.as_dict()
        d.update(changes)
        return TypedValue(self.htype, d)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}={v:#x}" for n, v in self.values)
        return f"<{self.htype.name} {inner}>"


def encode(v: TypedValue) -> BitString:
    """Pack fields big-endian in declaration order."""
    acc = 0
    total = 0
    for (_, width), (_, val) in zip(v.htype.fields, v.values):
        acc = (acc << width) | val
        total += width
    return BitString(acc, total)


class ExtractStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


def extract(htype: HeaderType, p: BitString) -> tuple[Optional[TypedValue], ExtractStatus, BitString]:
    """Decode one header off the front of p.

    Total: a short input yields (None, FAILURE, p) with p unchanged,
    never an exception.
    """
    total = htype.total_width
    if len(p) < total:
        return None, ExtractStatus.FAILURE, p
    vals = {}
    pos = 0
    for fname, width in htype.fields:
        vals[fname] = p.slice(pos, width).value
        pos += width
    return TypedValue(htype, vals), ExtractStatus.SUCCESS, p.drop(total)


def advance(p: BitString, n: int) -> tuple[ExtractStatus, BitString]:
    """Skip n bits; FAILURE with p unchanged when n exceeds the length."""
    if n < 0:
        raise ValueError(f"negative advance: {n}")
    if n > len(p):
        return ExtractStatus.FAILURE, p
    return ExtractStatus.SUCCESS, p.drop(n)


# ---------------------------------------------------------------------------
# environments


class Environment(Mapping):
    """Bindings accumulated during a match.  Lookup of a missing name
    raises UnresolvedCondition so that branch predicates fail loudly
    rather than guessing."""

    def __init__(self, bindings: Optional[Mapping] = None) -> None:
        self._b: dict = dict(bindings) if bindings else {}

    def __getitem__(self, name: str):
        try:
            return self._b[name]
        except KeyError:
            raise UnresolvedCondition(f"binding {name!r} is not in scope") from None

    def __contains__(self, name) -> bool:
        # membership tests stay quiet; only lookups fail loudly
        return name in self._b

    def __iter__(self) -> Iterator[str]:
        return iter(self._b)

    def __len__(self) -> int:
        return len(self._b)

    def __repr__(self) -> str:
        return f"Environment({sorted(self._b)})"


# ---------------------------------------------------------------------------
# format language


class Format:
    """Base class; see module docstring for the constructors."""

    __slots__ = ()


@dataclass(frozen=True)
class Empty(Format):
    pass


@dataclass(frozen=True)
class ExactValue(Format):
    name: str
    htype: HeaderType


@dataclass(frozen=True)
class ExactPlain(Format):
    name: str


@dataclass(frozen=True)
class Concat(Format):
    left: Format
    right: Format


@dataclass(frozen=True)
class Branch(Format):
    cond: Callable[[Environment], bool] = field(compare=False)
    then: Format = Empty()
    els: Format = Empty()
    label: str = ""


def seq(*formats: Format) -> Format:
    """Right-nested concatenation of several formats."""
    if not formats:
        return Empty()
    out = formats[-1]
    for f in reversed(formats[:-1]):
        out = Concat(f, out)
    return out


class Unbounded:
    """Width of a format containing ExactPlain."""

    _instance: Optional["Unbounded"] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNBOUNDED"


UNBOUNDED = Unbounded()


def format_width(f: Format, env: Environment):
    """Bit width of f under env, or UNBOUNDED.

    Raises UnresolvedCondition when a branch condition reads a name
    absent from env.
    """
    if isinstance(f, Empty):
        return 0
    if isinstance(f, ExactValue):
        return f.htype.total_width
    if isinstance(f, ExactPlain):
        return UNBOUNDED
    if isinstance(f, Concat):
        wl = format_width(f.left, env)
        if wl is UNBOUNDED:
            return UNBOUNDED
        wr = format_width(f.right, env)
        if wr is UNBOUNDED:
            return UNBOUNDED
        return wl + wr
    if isinstance(f, Branch):
        return format_width(f.then if f.cond(env) else f.els, env)
    raise TypeError(f"not a Format: {f!r}")


def check_well_formed(f: Format) -> None:
    """Raise IllFormedFormat on duplicate bindings or an ExactPlain
    outside terminal position (which would make a concat split
    ambiguous)."""
    names: set[str] = set()

    def walk(g: Format, terminal: bool) -> None:
        if isinstance(g, (Empty,)):
            return
        if isinstance(g, (ExactValue, ExactPlain)):
            if g.name in names:
                raise IllFormedFormat(f"duplicate binding {g.name!r}")
            names.add(g.name)
            if isinstance(g, ExactPlain) and not terminal:
                raise IllFormedFormat(
                    f"ExactPlain({g.name!r}) in non-terminal position has no determined width")
            return
        if isinstance(g, Concat):
            walk(g.left, False)
            walk(g.right, terminal)
            return
        if isinstance(g, Branch):
            # arms bind alternatively, so they may reuse names between them
            before = set(names)
            walk(g.then, terminal)
            then_names = set(names)
            names.clear()
            names.update(before)
            walk(g.els, terminal)
            names.update(then_names)
            return
        raise TypeError(f"not a Format: {g!r}")

    walk(f, True)


class MatchFailure(Exception):
    """Internal: carries the bit offset where matching stopped."""

    def __init__(self, offset: int, reason: str) -> None:
        super().__init__(f"no match at bit {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def _match_prefix(f: Format, p: BitString, pos: int, env: dict) -> int:
    if isinstance(f, Empty):
        return pos
    if isinstance(f, ExactValue):
        width = f.htype.total_width
        if pos + width > len(p):
            raise MatchFailure(pos, f"need {width} bits for {f.htype.name}, "
                                    f"have {len(p) - pos}")
        v, status, _ = extract(f.htype, p.slice(pos, width))
        assert status is ExtractStatus.SUCCESS
        env[f.name] = v
        return pos + width
    if isinstance(f, ExactPlain):
        env[f.name] = p.drop(pos)
        return len(p)
    if isinstance(f, Concat):
        mid = _match_prefix(f.left, p, pos, env)
        return _match_prefix(f.right, p, mid, env)
    if isinstance(f, Branch):
        arm = f.then if f.cond(Environment(env)) else f.els
        return _match_prefix(arm, p, pos, env)
    raise TypeError(f"not a Format: {f!r}")


def matches(p: BitString, f: Format) -> tuple[bool, Environment]:
    """Decide whether p is exactly described by f.

    On success the environment holds one binding per matched
    ExactValue / ExactPlain.  On failure it holds whatever was bound
    before the mismatch, which is occasionally useful for diagnostics.
    """
    check_well_formed(f)
    env: dict = {}
    try:
        end = _match_prefix(f, p, 0, env)
    except MatchFailure:
        return False, Environment(env)
    if end != len(p):
        return False, Environment(env)
    return True, Environment(env)


def match_report(p: BitString, f: Format) -> dict:
    """Like matches, but returns a diagnostic dict for tooling:
    {"ok", "env", "fail_bit", "reason"}."""
    check_well_formed(f)
    env: dict = {}
    try:
        end = _match_prefix(f, p, 0, env)
    except MatchFailure as e:
        return {"ok": False, "env": Environment(env), "fail_bit": e.offset,
                "reason": e.reason}
    if end != len(p):
        return {"ok": False, "env": Environment(env), "fail_bit": end,
                "reason": f"{len(p) - end} trailing bits"}
    return {"ok": True, "env": Environment(env), "fail_bit": None, "reason": ""}


def reconstruct(f: Format, env: Environment) -> BitString:
    """Re-encode env's bindings in format order.  For any successful
    match this reproduces the original input exactly."""
    if isinstance(f, Empty):
        return EMPTY_BITS
    if isinstance(f, ExactValue):
        return encode(env[f.name])
    if isinstance(f, ExactPlain):
        return env[f.name]
    if isinstance(f, Concat):
        return reconstruct(f.left, env) + reconstruct(f.right, env)
    if isinstance(f, Branch):
        return reconstruct(f.then if f.cond(env) else f.els, env)
    raise TypeError(f"not a Format: {f!r}")
