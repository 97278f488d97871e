"""Keys, column types, schemas and the canonical row encoding.

Rows are encoded as the fixed-width columns in declaration order (little
endian), followed by every Binary column as a u32 length plus payload.
Keys are raw byte strings ordered by unsigned lexicographic comparison.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Any, Sequence

MAX_KEY_SIZE = 1024
MAX_BINARY_SIZE = 16 * 1024 * 1024
MAX_COLUMNS = 256
MAX_COLUMN_NAME = 64

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1


class DataModelError(ValueError):
    pass


class DecodeError(DataModelError):
    pass


class ColumnType(enum.IntEnum):
    INTEGER = 1
    LONG = 2
    DOUBLE = 3
    BINARY = 4

    @classmethod
    def from_tag(cls, tag: int) -> "ColumnType":
        try:
            return cls(tag)
        except ValueError:
            raise DecodeError(f"unknown column type tag {tag}") from None


_FIXED = {
    ColumnType.INTEGER: ("i", 4),
    ColumnType.LONG: ("q", 8),
    ColumnType.DOUBLE: ("d", 8),
}


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType


class Schema:
    """An immutable ordered list of named, typed columns."""

    __slots__ = ("columns", "_fixed_fmt", "_fixed_idx", "_binary_idx", "_fixed_size")

    def __init__(self, columns: Sequence[tuple[str, ColumnType] | Column]):
        cols = tuple(c if isinstance(c, Column) else Column(c[0], ColumnType(c[1])) for c in columns)
        if not 1 <= len(cols) <= MAX_COLUMNS:
            raise DataModelError(f"schema needs 1..{MAX_COLUMNS} columns, got {len(cols)}")
        names = set()
        for c in cols:
            if len(c.name.encode()) > MAX_COLUMN_NAME:
                raise DataModelError(f"column name too long: {c.name!r}")
            if c.name in names:
                raise DataModelError(f"duplicate column name {c.name!r}")
            names.add(c.name)
        object.__setattr__(self, "columns", cols)
        fixed = [i for i, c in enumerate(cols) if c.type in _FIXED]
        object.__setattr__(self, "_fixed_idx", tuple(fixed))
        object.__setattr__(self, "_binary_idx", tuple(i for i, c in enumerate(cols) if c.type is ColumnType.BINARY))
        fmt = "<" + "".join(_FIXED[cols[i].type][0] for i in fixed)
        object.__setattr__(self, "_fixed_fmt", struct.Struct(fmt))
        object.__setattr__(self, "_fixed_size", struct.calcsize(fmt))

    def __setattr__(self, name, value):
        raise AttributeError("Schema is immutable")

    def __len__(self) -> int:
        return len(self.columns)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Schema) and self.columns == other.columns

    def __hash__(self) -> int:
        return hash(self.columns)

    def __repr__(self) -> str:
        inner = ", ".join(f"{c.name}:{c.type.name}" for c in self.columns)
        return f"Schema({inner})"

    @classmethod
    def of(cls, *types: ColumnType) -> "Schema":
        """Schema with auto-named columns ``c0, c1, ...``."""
        return cls([(f"c{i}", t) for i, t in enumerate(types)])

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    # Schema wire form: u16 count, then per column u8 type, u8 name len, name.
    def to_bytes(self) -> bytes:
        out = bytearray(struct.pack("<H", len(self.columns)))
        for c in self.columns:
            name = c.name.encode()
            out += struct.pack("<BB", int(c.type), len(name)) + name
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["Schema", int]:
        try:
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            cols = []
            for _ in range(n):
                tag, ln = struct.unpack_from("<BB", data, offset)
                offset += 2
                name = bytes(data[offset:offset + ln])
                if len(name) != ln:
                    raise DecodeError("truncated schema")
                offset += ln
                cols.append(Column(name.decode(), ColumnType.from_tag(tag)))
        except struct.error as e:
            raise DecodeError(f"truncated schema: {e}") from None
        return cls(cols), offset


def compare_keys(a: bytes, b: bytes) -> int:
    """Return -1, 0 or 1. Python bytes already compare unsigned-lexicographically."""
    return (a > b) - (a < b)


def check_key(key: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray, memoryview)):
        raise DataModelError(f"key must be bytes, got {type(key).__name__}")
    key = bytes(key)
    if not 1 <= len(key) <= MAX_KEY_SIZE:
        raise DataModelError(f"key length {len(key)} outside 1..{MAX_KEY_SIZE}")
    return key


def time_key(tag: bytes, timestamp: int) -> bytes:
    """Composite key whose byte order equals (tag, timestamp) order.

    Timestamps are unsigned 64-bit; the tag should be fixed-length per table,
    otherwise a shorter tag that prefixes a longer one interleaves with it.
    """
    if not 0 <= timestamp < 2**64:
        raise DataModelError("timestamp must fit in an unsigned 64-bit integer")
    return check_key(bytes(tag) + timestamp.to_bytes(8, "big"))


def split_time_key(key: bytes) -> tuple[bytes, int]:
    return key[:-8], int.from_bytes(key[-8:], "big")


def index_key(index: int) -> bytes:
    """Big-endian u64, used for log indexes and other dense counters."""
    return index.to_bytes(8, "big")


def _check_value(col: Column, v: Any) -> None:
    t = col.type
    tv = type(v)
    # fast paths for the common exact types
    if tv is int:
        if t is ColumnType.LONG:
            if INT64_MIN <= v <= INT64_MAX:
                return
        elif t is ColumnType.INTEGER:
            if INT32_MIN <= v <= INT32_MAX:
                return
        elif t is ColumnType.DOUBLE:
            return
    elif tv is bytes and t is ColumnType.BINARY and len(v) <= MAX_BINARY_SIZE:
        return
    elif tv is float and t is ColumnType.DOUBLE:
        return
    if t is ColumnType.BINARY:
        if not isinstance(v, (bytes, bytearray, memoryview)):
            raise DataModelError(f"column {col.name!r} expects bytes, got {type(v).__name__}")
        if len(v) > MAX_BINARY_SIZE:
            raise DataModelError(f"column {col.name!r}: binary value exceeds 16 MiB")
    elif t is ColumnType.DOUBLE:
        if isinstance(v, bool) or not isinstance(v, (float, int)):
            raise DataModelError(f"column {col.name!r} expects float, got {type(v).__name__}")
    else:
        if isinstance(v, bool) or not isinstance(v, int):
            raise DataModelError(f"column {col.name!r} expects int, got {type(v).__name__}")
        lo, hi = (INT32_MIN, INT32_MAX) if t is ColumnType.INTEGER else (INT64_MIN, INT64_MAX)
        if not lo <= v <= hi:
            raise DataModelError(f"column {col.name!r}: {v} out of range for {t.name}")


def validate_row(schema: Schema, row: Sequence[Any]) -> None:
    if len(row) != len(schema.columns):
        raise DataModelError(f"row arity {len(row)} != schema arity {len(schema.columns)}")
    for col, v in zip(schema.columns, row):
        _check_value(col, v)


def encode_row(schema: Schema, row: Sequence[Any]) -> bytes:
    validate_row(schema, row)
    parts = [schema._fixed_fmt.pack(*(row[i] for i in schema._fixed_idx))]
    for i in schema._binary_idx:
        v = row[i]
        parts.append(len(v).to_bytes(4, "little"))
        parts.append(bytes(v))
    return b"".join(parts)


def decode_row(schema: Schema, data: bytes) -> tuple:
    data = memoryview(data)
    n = len(data)
    size = schema._fixed_size
    if n < size:
        raise DecodeError(f"truncated row: need {size} fixed bytes, have {n}")
    out: list[Any] = [None] * len(schema.columns)
    for i, v in zip(schema._fixed_idx, schema._fixed_fmt.unpack_from(data, 0)):
        out[i] = v
    pos = size
    for i in schema._binary_idx:
        if pos + 4 > n:
            raise DecodeError("truncated row: missing binary length")
        ln = int.from_bytes(data[pos:pos + 4], "little")
        pos += 4
        if ln > n - pos:
            raise DecodeError(f"binary length {ln} exceeds remaining {n - pos} bytes")
        out[i] = bytes(data[pos:pos + ln])
        pos += ln
    if pos != n:
        raise DecodeError(f"{n - pos} trailing bytes after row")
    return tuple(out)


def rows_equal(a: Sequence[Any], b: Sequence[Any]) -> bool:
    """Row equality treating NaN doubles as equal to themselves."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if x != y:
            return False
    return True
