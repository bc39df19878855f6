import math

import pytest
from hypothesis import given, strategies as st

from rmalib.core import (
    CAS,
    MAX_MEMHANDLE_SIZE,
    MEMHANDLE_SIZE,
    Datatype,
    InfoMap,
    LatencyParams,
    ReduceOp,
    RegistrationRecord,
    decode_memhandle,
    encode_memhandle,
    pack,
    parse_flat_config,
    parse_ops_string,
    reduce_bytes,
    unpack,
)
from rmalib.errors import (
    BadMagic,
    BadVersion,
    InvalidArgument,
    InvalidInfoValue,
    InvalidOpsString,
    Truncated,
)

# owner=3, base=0x1000, size=4096, rkey=7, parent window=2, laid out by hand
VECTOR = bytes.fromhex(
    "4d48444c" "01" "00" "0000"
    "00000003"
    "0000000000001000"
    "0000000000001000"
    "0000000000000007"
    "0000000000000002"
)

u64 = st.integers(0, 2**64 - 1)
records = st.builds(
    RegistrationRecord,
    owner=st.integers(0, 2**32 - 1),
    base=u64,
    size=st.integers(1, 2**64 - 1),
    rkey=u64,
    parent_window_id=u64,
)


def test_datatype_sizes():
    assert [d.size_bytes for d in Datatype] == [1, 4, 8, 4, 8]


def test_encode_matches_hand_layout():
    rec = RegistrationRecord(3, 0x1000, 4096, 7, 2)
    assert encode_memhandle(rec) == VECTOR
    assert decode_memhandle(VECTOR) == rec


def test_minimal_record_header():
    blob = encode_memhandle(RegistrationRecord(0, 0, 1, 0, 0))
    assert blob[:4] == b"\x4d\x48\x44\x4c"
    assert blob[4] == 1 and blob[5] == 0 and blob[6:8] == b"\0\0"
    assert len(blob) == MEMHANDLE_SIZE == 44 <= MAX_MEMHANDLE_SIZE


@given(records)
def test_round_trip(rec):
    blob = encode_memhandle(rec)
    assert len(blob) == 44
    assert decode_memhandle(blob) == rec
    assert encode_memhandle(decode_memhandle(blob)) == blob


def test_decode_errors_are_distinct():
    with pytest.raises(BadMagic):
        decode_memhandle(b"\0\0\0\0" + VECTOR[4:])
    with pytest.raises(BadVersion):
        decode_memhandle(VECTOR[:4] + b"\x02" + VECTOR[5:])
    with pytest.raises(Truncated):
        decode_memhandle(VECTOR[:20])
    codes = {BadMagic.code, BadVersion.code, Truncated.code}
    assert len(codes) == 3


def test_decode_accepts_padded_buffer():
    assert decode_memhandle(VECTOR + bytes(20)).rkey == 7


@pytest.mark.parametrize("bad", [
    dict(owner=0, base=0, size=0, rkey=0),
    dict(owner=-1, base=0, size=1, rkey=0),
    dict(owner=0, base=2**64, size=1, rkey=0),
])
def test_record_validation(bad):
    with pytest.raises(InvalidArgument):
        RegistrationRecord(**bad)


def test_record_covers():
    rec = RegistrationRecord(0, 100, 50, 1)
    assert rec.covers(100, 50) and rec.covers(120, 1)
    assert not rec.covers(99, 2) and not rec.covers(149, 2)


def test_parse_ops_examples():
    assert parse_ops_string("sum") == {ReduceOp.SUM}
    assert parse_ops_string("sum,cas,replace") == {ReduceOp.SUM, CAS, ReduceOp.REPLACE}
    assert parse_ops_string(" SUM , no_op ,") == {ReduceOp.SUM, ReduceOp.NO_OP}
    with pytest.raises(InvalidOpsString) as info:
        parse_ops_string("fma")
    assert info.value.token == "fma"


@given(st.permutations(["sum", "prod", "min", "max", "band", "bor", "bxor", "replace", "no_op", "cas"]),
       st.sampled_from(["", " ", "  "]))
def test_parse_ops_order_and_space_insensitive(names, pad):
    text = ",".join(f"{pad}{n}{pad}" for n in names)
    assert parse_ops_string(text) == parse_ops_string(",".join(sorted(names)))


def test_pack_wraps_and_unpacks():
    assert pack(Datatype.INT32, [1, -1]) == b"\x01\0\0\0\xff\xff\xff\xff"
    assert unpack(Datatype.INT64, pack(Datatype.INT64, 2**63)) == [-(2**63)]
    assert pack(Datatype.BYTE, b"ab") == b"ab"
    with pytest.raises(InvalidArgument):
        pack(Datatype.INT32, b"abc")


@pytest.mark.parametrize("op,old,new,want", [
    (ReduceOp.SUM, 5, 7, 12),
    (ReduceOp.PROD, 5, 7, 35),
    (ReduceOp.MIN, 5, 7, 5),
    (ReduceOp.MAX, 5, 7, 7),
    (ReduceOp.BAND, 6, 3, 2),
    (ReduceOp.BOR, 6, 3, 7),
    (ReduceOp.BXOR, 6, 3, 5),
    (ReduceOp.REPLACE, 5, 7, 7),
    (ReduceOp.NO_OP, 5, 7, 5),
])
def test_reduce_int64(op, old, new, want):
    out = reduce_bytes(op, Datatype.INT64, pack(Datatype.INT64, old), pack(Datatype.INT64, new))
    assert unpack(Datatype.INT64, out) == [want]


def test_reduce_elementwise_and_overflow():
    out = reduce_bytes(ReduceOp.SUM, Datatype.INT32, pack(Datatype.INT32, [2**31 - 1, 1]),
                       pack(Datatype.INT32, [1, 2]))
    assert unpack(Datatype.INT32, out) == [-(2**31), 3]


def test_bitwise_rejected_on_floats():
    assert not ReduceOp.BXOR.valid_for(Datatype.FLOAT64)
    assert ReduceOp.SUM.valid_for(Datatype.FLOAT64)
    with pytest.raises(InvalidArgument):
        reduce_bytes(ReduceOp.BAND, Datatype.FLOAT32, pack(Datatype.FLOAT32, 1.0), pack(Datatype.FLOAT32, 1.0))


def test_info_map_validation_and_passthrough():
    info = InfoMap({"mpi_win_scope": "thread", "mpi_win_order": True, "vendor_hint": "Keep Case"})
    assert info["mpi_win_order"] == "true"
    assert info["vendor_hint"] == "Keep Case"
    assert info.scope == "thread" and info.ordered
    with pytest.raises(InvalidInfoValue):
        InfoMap({"mpi_win_scope": "bogus"})
    with pytest.raises(InvalidInfoValue):
        InfoMap({"mpi_dynamic_mode": "magic"})


def test_info_defaults_and_merge():
    base = InfoMap()
    assert base.scope == "process" and not base.ordered and not base.assert_intrinsic
    assert base.dynamic_mode == "rkey_fetch"
    merged = InfoMap({"mpi_win_scope": "thread", "x": "1"}).merged({"x": "2"})
    assert dict(merged) == {"mpi_win_scope": "thread", "x": "2"}
    assert InfoMap({"accumulate_ordering": "rar,war"})["accumulate_ordering"] == "rar,war"


def test_latency_defaults():
    p = LatencyParams()
    assert (p.t_inject, p.t_rtt, p.bandwidth, p.t_atomic_nic, p.t_am_handler, p.t_rkey_fetch,
            p.t_win_create) == (0.2, 2.0, 25000, 0.3, 0.5, 2.0, 1.0)
    assert LatencyParams(t_rtt=4.0).t_rkey_fetch == 4.0


def test_latency_validation():
    for bad in (0, -1, math.inf, math.nan):
        with pytest.raises(InvalidArgument):
            LatencyParams(t_inject=bad)
    with pytest.raises(InvalidArgument):
        LatencyParams.from_mapping({"t_warp": "1"})


def test_latency_file_round_trip(tmp_path):
    path = tmp_path / "lat.conf"
    path.write_text("# custom\nt_rtt = 3.5\n\nbandwidth=1000\n")
    p = LatencyParams.from_file(path)
    assert p.t_rtt == 3.5 and p.bandwidth == 1000 and p.t_rkey_fetch == 3.5
    path.write_text(p.to_text())
    assert LatencyParams.from_file(path) == p


def test_flat_config_rejects_garbage():
    assert parse_flat_config("a=1\n# c\n b = x y \n") == {"a": "1", "b": "x y"}
    with pytest.raises(InvalidArgument):
        parse_flat_config("no equals sign")
