"""Replicated log kept in its own pagestore database.

Table ``rlog``: key = big-endian index, row = (term, payload) where payload is
the encoded request batch. Table ``meta``: hard state (current term, vote) and
the checkpoint boundary. Entries are mirrored in memory from the checkpoint
boundary on, so the hot path never reads the tree.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from ..datamodel import ColumnType, DecodeError, Schema, index_key
from ..pagestore import Store

RLOG = "rlog"
META = "meta"
RLOG_SCHEMA = Schema([("term", ColumnType.LONG), ("payload", ColumnType.BINARY)])
META_SCHEMA = Schema([("value", ColumnType.LONG)])

NO_VOTE = -1

_REQ = struct.Struct("<QQQBI")


@dataclass(frozen=True)
class ClientRequest:
    client_id: int
    request_id: int
    command: bytes
    ts_us: int = 0
    read: bool = False

    @property
    def size(self) -> int:
        return _REQ.size + len(self.command)


@dataclass(frozen=True)
class RLogEntry:
    term: int
    index: int
    batch: tuple = ()

    @property
    def size(self) -> int:
        return 16 + sum(r.size for r in self.batch)


def encode_batch(batch) -> bytes:
    parts = [struct.pack("<I", len(batch))]
    for r in batch:
        parts.append(_REQ.pack(r.client_id, r.request_id, r.ts_us, 1 if r.read else 0, len(r.command)))
        parts.append(r.command)
    return b"".join(parts)


def decode_batch(data: bytes) -> tuple:
    if len(data) < 4:
        raise DecodeError("truncated batch")
    (n,) = struct.unpack_from("<I", data, 0)
    pos, out = 4, []
    for _ in range(n):
        if pos + _REQ.size > len(data):
            raise DecodeError("truncated batch request")
        cid, rid, ts, flags, ln = _REQ.unpack_from(data, pos)
        pos += _REQ.size
        if pos + ln > len(data):
            raise DecodeError("batch command overruns payload")
        out.append(ClientRequest(cid, rid, bytes(data[pos:pos + ln]), ts, bool(flags & 1)))
        pos += ln
    if pos != len(data):
        raise DecodeError("trailing bytes after batch")
    return tuple(out)


class RaftLog:
    def __init__(self, store: Store, durable: bool = True):
        self.store = store
        self.durable = durable
        for name, schema in ((RLOG, RLOG_SCHEMA), (META, META_SCHEMA)):
            if not store.has_table(name):
                store.create_table(name, schema)
        self.term = self._meta(b"term", 0)
        self.voted_for = self._meta(b"vote", NO_VOTE)
        self.snapshot_index = self._meta(b"snap_index", 0)
        self.snapshot_term = self._meta(b"snap_term", 0)
        self._entries: list[RLogEntry] = []
        for key, (term, payload) in store.range_scan(RLOG, index_key(self.snapshot_index + 1)):
            idx = struct.unpack(">Q", key)[0]
            self._entries.append(RLogEntry(term, idx, decode_batch(payload)))
        for i, e in enumerate(self._entries):
            if e.index != self.snapshot_index + 1 + i:
                raise DecodeError(f"log gap at index {e.index}")

    def _meta(self, key: bytes, default: int) -> int:
        row = self.store.get(META, key)
        return row[0] if row else default

    # --- queries ---------------------------------------------------------------------
    @property
    def first_index(self) -> int:
        return self.snapshot_index + 1

    @property
    def last_index(self) -> int:
        return self.snapshot_index + len(self._entries)

    @property
    def last_term(self) -> int:
        return self._entries[-1].term if self._entries else self.snapshot_term

    def term_at(self, index: int) -> int | None:
        """Term of ``index``; None when unknown (beyond the end or compacted away)."""
        if index == self.snapshot_index:
            return self.snapshot_term
        if index < self.snapshot_index or index > self.last_index:
            return None
        return self._entries[index - self.snapshot_index - 1].term

    def entry(self, index: int) -> RLogEntry:
        if index <= self.snapshot_index or index > self.last_index:
            raise IndexError(index)
        return self._entries[index - self.snapshot_index - 1]

    def entries(self, lo: int, hi: int) -> list[RLogEntry]:
        """Entries with ``lo <= index <= hi``."""
        base = self.snapshot_index + 1
        return self._entries[max(lo, base) - base:max(hi + 1, base) - base]

    # --- mutation ------------------------------------------------------------------------
    def set_hard_state(self, term: int, voted_for: int) -> None:
        if term == self.term and voted_for == self.voted_for:
            return
        self.term, self.voted_for = term, voted_for
        self.store.upsert_many(META, [(b"term", (term,)), (b"vote", (voted_for,))])

    def append(self, entries) -> None:
        if not entries:
            return
        if entries[0].index != self.last_index + 1:
            raise ValueError(f"append at {entries[0].index}, log ends at {self.last_index}")
        self.store.upsert_many(RLOG, [(index_key(e.index), (e.term, encode_batch(e.batch))) for e in entries])
        self._entries.extend(entries)

    def truncate_from(self, index: int) -> int:
        """Drop entries ``>= index`` (conflicting suffix)."""
        if index > self.last_index:
            return 0
        if index <= self.snapshot_index:
            raise ValueError("cannot truncate below the checkpoint")
        n = self.store.delete_range(RLOG, index_key(index))
        del self._entries[index - self.snapshot_index - 1:]
        return n

    def compact(self, upto: int) -> int:
        """Checkpoint: forget entries ``<= upto`` (already applied and flushed
        into the state machine) with ordinary in-place range deletion."""
        if upto <= self.snapshot_index:
            return 0
        term = self.term_at(upto)
        if term is None:
            raise ValueError(f"cannot compact past the end of the log ({upto})")
        n = self.store.delete_range(RLOG, index_key(self.snapshot_index + 1), index_key(upto))
        del self._entries[:upto - self.snapshot_index]
        self.snapshot_index, self.snapshot_term = upto, term
        self.store.upsert_many(META, [(b"snap_index", (upto,)), (b"snap_term", (term,))])
        return n

    def reset_to_snapshot(self, index: int, term: int) -> None:
        """After installing a snapshot: keep a matching suffix, else drop everything."""
        if self.term_at(index) == term and index <= self.last_index:
            self.compact(index)
            return
        self.store.delete_range(RLOG)
        self._entries.clear()
        self.snapshot_index, self.snapshot_term = index, term
        self.store.upsert_many(META, [(b"snap_index", (index,)), (b"snap_term", (term,))])

    def sync(self) -> None:
        """Make everything written so far durable before it is acknowledged."""
        if self.durable:
            self.store.flush()
