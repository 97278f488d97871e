import math
import struct

import pytest
from hypothesis import given, strategies as st

from maxwellite.datamodel import (ColumnType as C, DataModelError, DecodeError, Schema, compare_keys,
                                  decode_row, encode_row, split_time_key, time_key)


def test_compare_keys_examples():
    assert compare_keys(b"\x01", b"\x01") == 0
    assert compare_keys(b"\x01", b"\x01\x02") == -1
    # first byte decides: 0x02 > 0x01
    assert compare_keys(b"\x02", b"\x01\xff") == 1


def test_encode_examples():
    assert encode_row(Schema.of(C.INTEGER), [7]) == bytes.fromhex("07000000")
    assert encode_row(Schema.of(C.BINARY), [b""]) == bytes.fromhex("00000000")
    assert encode_row(Schema.of(C.LONG, C.BINARY), [1, b"\xab"]) == bytes.fromhex("0100000000000000" "01000000" "ab")


def test_decode_examples():
    assert decode_row(Schema.of(C.INTEGER), bytes.fromhex("07000000")) == (7,)
    assert decode_row(Schema.of(C.BINARY), bytes.fromhex("00000000")) == (b"",)
    with pytest.raises(DecodeError, match="truncated"):
        decode_row(Schema.of(C.INTEGER), bytes.fromhex("070000"))


def test_fixed_columns_precede_binaries():
    schema = Schema.of(C.BINARY, C.DOUBLE)
    data = encode_row(schema, [b"xy", 1.5])
    assert data == struct.pack("<d", 1.5) + b"\x02\x00\x00\x00xy"
    assert decode_row(schema, data) == (b"xy", 1.5)


@pytest.mark.parametrize("schema,row", [
    (Schema.of(C.INTEGER), [1, 2]),
    (Schema.of(C.INTEGER), ["1"]),
    (Schema.of(C.INTEGER), [2**31]),
    (Schema.of(C.LONG), [True]),
    (Schema.of(C.BINARY), [1]),
])
def test_encode_rejects_bad_rows(schema, row):
    with pytest.raises(DataModelError):
        encode_row(schema, row)


def test_decode_errors():
    s = Schema.of(C.BINARY)
    with pytest.raises(DecodeError, match="exceeds"):
        decode_row(s, b"\x05\x00\x00\x00ab")
    with pytest.raises(DecodeError, match="trailing"):
        decode_row(s, b"\x00\x00\x00\x00z")
    with pytest.raises(DecodeError):
        decode_row(Schema.of(C.INTEGER, C.BINARY), b"\x01\x00\x00\x00\x01")


def test_schema_rules():
    with pytest.raises(DataModelError):
        Schema([])
    with pytest.raises(DataModelError):
        Schema([("a", C.LONG), ("a", C.LONG)])
    with pytest.raises(DataModelError):
        Schema([("x" * 65, C.LONG)])
    Schema([(f"c{i}", C.LONG) for i in range(256)])
    with pytest.raises(DataModelError):
        Schema([(f"c{i}", C.LONG) for i in range(257)])
    s = Schema([("bal", C.LONG), ("blob", C.BINARY)])
    with pytest.raises(AttributeError):
        s.columns = ()
    back, end = Schema.from_bytes(s.to_bytes())
    assert back == s and end == len(s.to_bytes())


def test_unknown_type_tag_is_decode_error():
    raw = bytearray(Schema.of(C.LONG).to_bytes())
    raw[2] = 9
    with pytest.raises(DecodeError, match="unknown column type"):
        Schema.from_bytes(bytes(raw))


values = {
    C.INTEGER: st.integers(-(2**31), 2**31 - 1),
    C.LONG: st.integers(-(2**63), 2**63 - 1),
    C.DOUBLE: st.floats(allow_nan=True),
    C.BINARY: st.binary(max_size=300),
}


@st.composite
def schema_and_row(draw):
    types = draw(st.lists(st.sampled_from(list(C)), min_size=1, max_size=12))
    row = [draw(values[t]) for t in types]
    return Schema.of(*types), row


def _same(a, b):
    return all((isinstance(x, float) and math.isnan(x) and math.isnan(y)) or x == y for x, y in zip(a, b))


@given(schema_and_row())
def test_round_trip(sr):
    schema, row = sr
    back = decode_row(schema, encode_row(schema, row))
    assert len(back) == len(row) and _same(back, row)


@given(st.binary(min_size=1, max_size=4), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_time_key_order_matches_timestamp_order(tag, t1, t2):
    a, b = time_key(tag, t1), time_key(tag, t2)
    assert compare_keys(a, b) == (t1 > t2) - (t1 < t2)
    assert split_time_key(a) == (tag, t1)


@given(st.binary(max_size=8), st.binary(max_size=8), st.binary(max_size=8))
def test_compare_is_total_order(a, b, c):
    assert compare_keys(a, b) == -compare_keys(b, a)
    assert (compare_keys(a, b) == 0) == (a == b)
    if compare_keys(a, b) <= 0 and compare_keys(b, c) <= 0:
        assert compare_keys(a, c) <= 0
