"""Domain types, the memory-handle wire format and the ops-string parser."""

from __future__ import annotations

import enum
import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, fields
from pathlib import Path
from typing import NamedTuple, Union

from .errors import (
    BadMagic,
    BadVersion,
    InvalidArgument,
    InvalidInfoValue,
    InvalidOpsString,
    Truncated,
)

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class Datatype(enum.Enum):
    BYTE = "byte"
    INT32 = "int32"
    INT64 = "int64"
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def size_bytes(self) -> int:
        return _DT_INFO[self][0]

    @property
    def fmt(self) -> str:
        return _DT_INFO[self][1]

    @property
    def integral(self) -> bool:
        return self in (Datatype.BYTE, Datatype.INT32, Datatype.INT64)


# memory contents are little-endian; byte is unsigned
_DT_INFO = {
    Datatype.BYTE: (1, "<B"),
    Datatype.INT32: (4, "<i"),
    Datatype.INT64: (8, "<q"),
    Datatype.FLOAT32: (4, "<f"),
    Datatype.FLOAT64: (8, "<d"),
}


def pack(datatype: Datatype, values) -> bytes:
    """Encode ``values`` as consecutive elements of ``datatype``.

    Bytes-like input is passed through after a length check.
    """
    if isinstance(values, (bytes, bytearray, memoryview)):
        data = bytes(values)
        if len(data) % datatype.size_bytes:
            raise InvalidArgument(
                f"{len(data)} bytes is not a whole number of {datatype.value} elements"
            )
        return data
    if isinstance(values, (int, float)):
        values = [values]
    fmt = datatype.fmt
    return b"".join(struct.pack(fmt, _coerce(datatype, v)) for v in values)


def unpack(datatype: Datatype, data) -> list:
    fmt = datatype.fmt
    size = datatype.size_bytes
    return [struct.unpack_from(fmt, data, i)[0] for i in range(0, len(data), size)]


def _coerce(datatype, value):
    if datatype.integral:
        bits = datatype.size_bytes * 8
        value = int(value) & ((1 << bits) - 1)
        if datatype is not Datatype.BYTE and value >= 1 << (bits - 1):
            value -= 1 << bits
        return value
    return float(value)


class ReduceOp(enum.Enum):
    SUM = "sum"
    PROD = "prod"
    MIN = "min"
    MAX = "max"
    BAND = "band"
    BOR = "bor"
    BXOR = "bxor"
    REPLACE = "replace"
    NO_OP = "no_op"

    def valid_for(self, datatype: Datatype) -> bool:
        if self in (ReduceOp.BAND, ReduceOp.BOR, ReduceOp.BXOR):
            return datatype.integral
        return True


class _Cas(enum.Enum):
    CAS = "cas"

    def valid_for(self, datatype: Datatype) -> bool:
        return True


#: Marker for compare-and-swap in ops strings and capability tables.
CAS = _Cas.CAS

AtomicOp = Union[ReduceOp, _Cas]


def _reduce_scalar(op: ReduceOp, datatype: Datatype, old, new):
    if op is ReduceOp.SUM:
        r = old + new
    elif op is ReduceOp.PROD:
        r = old * new
    elif op is ReduceOp.MIN:
        r = min(old, new)
    elif op is ReduceOp.MAX:
        r = max(old, new)
    elif op is ReduceOp.BAND:
        r = old & new
    elif op is ReduceOp.BOR:
        r = old | new
    elif op is ReduceOp.BXOR:
        r = old ^ new
    elif op is ReduceOp.REPLACE:
        r = new
    else:
        r = old
    return _coerce(datatype, r)


def reduce_bytes(op: ReduceOp, datatype: Datatype, old: bytes, operand: bytes) -> bytes:
    """Element-wise ``old <op> operand`` over equally sized buffers."""
    if not op.valid_for(datatype):
        raise InvalidArgument(f"{op.value} is not defined for {datatype.value}")
    if op is ReduceOp.NO_OP:
        return bytes(old)
    if op is ReduceOp.REPLACE:
        return bytes(operand)
    olds = unpack(datatype, old)
    news = unpack(datatype, operand)
    return pack(datatype, [_reduce_scalar(op, datatype, a, b) for a, b in zip(olds, news)])


_OPS_BY_NAME = {op.value: op for op in ReduceOp}
_OPS_BY_NAME["cas"] = CAS


def parse_ops_string(ops: str) -> frozenset:
    """Parse a comma-delimited list of operation names.

    Names are the lowercase tail of the predefined reduction ops (``sum``,
    ``bxor``, ...), ``replace`` and ``cas``. Whitespace around names is
    ignored; empty entries are skipped.
    """
    result = set()
    for raw in ops.split(","):
        token = raw.strip().lower()
        if not token:
            continue
        try:
            result.add(_OPS_BY_NAME[token])
        except KeyError:
            raise InvalidOpsString(raw.strip()) from None
    return frozenset(result)


class Address(NamedTuple):
    rank: int
    vaddr: int


# ---------------------------------------------------------------------------
# registration records and the memory-handle blob

MAX_MEMHANDLE_SIZE = 64
MEMHANDLE_MAGIC = 0x4D48444C
MEMHANDLE_VERSION = 1
_BLOB = struct.Struct(">IBBHIQQQQ")
MEMHANDLE_SIZE = _BLOB.size
assert MEMHANDLE_SIZE == 44 <= MAX_MEMHANDLE_SIZE


@dataclass(frozen=True)
class RegistrationRecord:
    owner: int
    base: int
    size: int
    rkey: int
    parent_window_id: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise InvalidArgument("registration size must be positive")
        if not 0 <= self.owner <= U32_MAX:
            raise InvalidArgument(f"owner rank {self.owner} out of range")
        for name in ("base", "size", "rkey", "parent_window_id"):
            if not 0 <= getattr(self, name) <= U64_MAX:
                raise InvalidArgument(f"{name} does not fit in 64 bits")

    @property
    def end(self) -> int:
        return self.base + self.size

    def covers(self, vaddr: int, nbytes: int) -> bool:
        return self.base <= vaddr and vaddr + nbytes <= self.end


def encode_memhandle(record: RegistrationRecord) -> bytes:
    return _BLOB.pack(
        MEMHANDLE_MAGIC,
        MEMHANDLE_VERSION,
        0,
        0,
        record.owner,
        record.base,
        record.size,
        record.rkey,
        record.parent_window_id,
    )


def decode_memhandle(blob) -> RegistrationRecord:
    blob = bytes(blob)
    if len(blob) < MEMHANDLE_SIZE:
        raise Truncated(f"memory handle is {len(blob)} bytes, need {MEMHANDLE_SIZE}")
    magic, version, _flags, _reserved, owner, base, size, rkey, win = _BLOB.unpack_from(blob)
    if magic != MEMHANDLE_MAGIC:
        raise BadMagic(f"bad memory handle magic 0x{magic:08x}")
    if version != MEMHANDLE_VERSION:
        raise BadVersion(f"unsupported memory handle version {version}")
    if size == 0:
        raise Truncated("memory handle describes an empty region")
    return RegistrationRecord(owner, base, size, rkey, win)


# ---------------------------------------------------------------------------
# window info


SCOPE_KEY = "mpi_win_scope"
ORDER_KEY = "mpi_win_order"
ASSERT_INTRINSIC_KEY = "mpi_assert_accumulate_intrinsic"
ACC_ORDERING_KEY = "accumulate_ordering"
DYNAMIC_MODE_KEY = "mpi_dynamic_mode"

_ALLOWED = {
    SCOPE_KEY: ("process", "thread"),
    ORDER_KEY: ("true", "false"),
    ASSERT_INTRINSIC_KEY: ("true", "false"),
    DYNAMIC_MODE_KEY: ("rkey_fetch", "am"),
}
_DEFAULTS = {
    SCOPE_KEY: "process",
    ORDER_KEY: "false",
    ASSERT_INTRINSIC_KEY: "false",
}


def _normalize_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value).strip()


class InfoMap(Mapping):
    """Immutable string-to-string window configuration.

    Recognized keys are checked against their allowed values; anything else
    is carried through untouched.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping | Iterable | None = None):
        raw = dict(entries or {})
        clean = {}
        for key, value in raw.items():
            key = str(key)
            value = _normalize_value(value)
            if key in _ALLOWED:
                value = value.lower()
                if value not in _ALLOWED[key]:
                    raise InvalidInfoValue(f"{key}={value!r}; expected one of {_ALLOWED[key]}")
            clean[key] = value
        self._entries = clean

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"InfoMap({self._entries!r})"

    def __eq__(self, other):
        if isinstance(other, Mapping):
            return dict(self.items()) == dict(other.items())
        return NotImplemented

    __hash__ = None

    def merged(self, overrides: Mapping | None) -> "InfoMap":
        entries = dict(self._entries)
        entries.update(InfoMap(overrides)._entries)
        return InfoMap(entries)

    def effective(self, key: str) -> str | None:
        return self._entries.get(key, _DEFAULTS.get(key))

    @property
    def scope(self) -> str:
        return self.effective(SCOPE_KEY)

    @property
    def ordered(self) -> bool:
        return self.effective(ORDER_KEY) == "true"

    @property
    def assert_intrinsic(self) -> bool:
        return self.effective(ASSERT_INTRINSIC_KEY) == "true"

    @property
    def dynamic_mode(self) -> str:
        return self._entries.get(DYNAMIC_MODE_KEY, "rkey_fetch")


# ---------------------------------------------------------------------------
# latency model parameters and flat config files


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


@dataclass(frozen=True)
class LatencyParams:
    """Timing model of the simulated NIC. All values in microseconds,
    except ``bandwidth`` (bytes per microsecond)."""

    t_inject: float = 0.2
    t_rtt: float = 2.0
    bandwidth: float = 25000.0
    t_atomic_nic: float = 0.3
    t_am_handler: float = 0.5
    t_rkey_fetch: float | None = None  # defaults to t_rtt
    t_win_create: float = 1.0

    def __post_init__(self):
        if self.t_rkey_fetch is None:
            object.__setattr__(self, "t_rkey_fetch", self.t_rtt)
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidArgument(f"{f.name} must be a positive number, got {value!r}")

    @classmethod
    def from_mapping(cls, entries: Mapping[str, str]) -> "LatencyParams":
        known = {f.name for f in fields(cls)}
        unknown = set(entries) - known
        if unknown:
            raise InvalidArgument(f"unknown latency parameter(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**{k: float(v) for k, v in entries.items()})
        except ValueError as exc:
            raise InvalidArgument(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "LatencyParams":
        return cls.from_mapping(parse_flat_config(Path(path).read_text()))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


__all__ = [
    "Address",
    "AtomicOp",
    "CAS",
    "Datatype",
    "InfoMap",
    "LatencyParams",
    "MAX_MEMHANDLE_SIZE",
    "MEMHANDLE_SIZE",
    "RegistrationRecord",
    "ReduceOp",
    "decode_memhandle",
    "encode_memhandle",
    "pack",
    "parse_flat_config",
    "parse_ops_string",
    "reduce_bytes",
    "unpack",
]
