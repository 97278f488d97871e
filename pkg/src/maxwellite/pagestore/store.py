"""The storage engine: one file per database, tables in a doubly linked list
of descriptor pages, a B+ tree per table and rows in slotted data pages that
are modified in place.

All methods are meant to be called from a single engine thread. Nothing in
here runs in the background: pages reach the disk only through eviction at
the end of a user operation or through :meth:`Store.flush`.
"""
from __future__ import annotations

import enum
import itertools
import logging
import os
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from ..datamodel import DataModelError, Schema, check_key, decode_row, encode_row
from .btree import BTree
from .cache import PageCache
from .format import (MAGIC, FORMAT_VERSION, NIL, OVERFLOW_CHUNK, PAGE_SIZE, PAYLOAD, ChecksumError,
                     CorruptionError, DataPage, DescriptorPage, FileHeader, FreePage, MemFile,
                     OsFile, OverflowPage, StoreError, unseal)

log = logging.getLogger(__name__)

INLINE_MAX = 1024
_INLINE, _OVERFLOW = 0, 1


class UnknownTableError(StoreError, KeyError):
    def __str__(self):
        return f"unknown table {self.args[0]!r}"


class DuplicateTableError(StoreError):
    pass


class SchemaMismatchError(StoreError, DataModelError):
    pass


class InvalidKeyError(StoreError, DataModelError):
    pass


def _key(key) -> bytes:
    try:
        return check_key(key)
    except DataModelError as e:
        raise InvalidKeyError(str(e)) from e


class TxnStateError(StoreError):
    pass


class OutOfPagesError(StoreError):
    pass


class UncleanShutdownError(CorruptionError):
    pass


class Outcome(enum.Enum):
    INSERTED = "inserted"
    UPDATED = "updated"


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class TxnState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ROLLED_BACK = "rolled_back"


TOMBSTONE = object()


@dataclass
class StoreConfig:
    page_size: int = PAGE_SIZE
    cache_capacity_pages: int = 1024
    create_if_missing: bool = True
    eviction_policy: str = "lru"
    max_pages: int | None = None
    # "verify": open an unclean file only if a full structural check passes
    on_unclean: str = "verify"


@dataclass(frozen=True)
class TableInfo:
    name: str
    schema: Schema
    row_count: int
    index_root: int
    height: int
    page_id: int


class Txn:
    """Buffered writes, visible only through this handle until commit."""

    def __init__(self, store: "Store", txn_id: int):
        self.store = store
        self.txn_id = txn_id
        self.writes: dict[str, dict[bytes, Any]] = {}
        self.state = TxnState.ACTIVE

    def _buffer(self, table: str) -> dict:
        return self.writes.setdefault(table, {})

    def _check_active(self) -> None:
        if self.state is not TxnState.ACTIVE:
            raise TxnStateError(f"transaction {self.txn_id} is {self.state.value}")

    def commit(self) -> None:
        self.store.commit(self)

    def rollback(self) -> None:
        self.store.rollback(self)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.state is TxnState.ACTIVE:
            if exc_type is None:
                self.commit()
            else:
                self.rollback()


class _Table:
    __slots__ = ("desc", "tree")

    def __init__(self, desc: DescriptorPage, tree: BTree):
        self.desc = desc
        self.tree = tree


class Store:
    def __init__(self, file, config: StoreConfig, header: FileHeader):
        self.file = file
        self.config = config
        self.cache = PageCache(file, header, config.cache_capacity_pages, config.eviction_policy)
        self.header = header
        self.tables_by_name: dict[str, _Table] = {}
        self._txn_ids = itertools.count(1)
        self.background_tasks = 0
        self.closed = False

    # --- open / close ----------------------------------------------------------------
    @classmethod
    def open(cls, path: str | os.PathLike | MemFile | None = None, config: StoreConfig | None = None,
             **overrides) -> "Store":
        """Open (or create) a database. ``path=None`` gives a fresh in-memory store."""
        config = config or StoreConfig()
        for k, v in overrides.items():
            setattr(config, k, v)
        if config.page_size != PAGE_SIZE:
            raise StoreError(f"unsupported page size {config.page_size}; only {PAGE_SIZE} is supported")
        if path is None:
            file = MemFile()
        elif isinstance(path, MemFile):
            file = path
        else:
            exists = os.path.exists(path)
            if not exists and not config.create_if_missing:
                raise FileNotFoundError(path)
            file = OsFile(path, create=config.create_if_missing)
        try:
            return cls._open_file(file, config)
        except BaseException:
            if not isinstance(file, MemFile):
                file.close()
            raise

    @classmethod
    def _open_file(cls, file, config: StoreConfig) -> "Store":
        if file.size() == 0:
            if not config.create_if_missing:
                raise StoreError("empty database file")
            header = FileHeader(config.page_size)
            file.write_at(0, header.encode())
            file.sync()
            store = cls(file, config, header)
            return store
        raw = file.read_at(0, PAGE_SIZE)
        header = FileHeader.decode(raw)
        if header.magic != MAGIC:
            raise CorruptionError("bad magic: not a maxwellite database")
        if header.format_version != FORMAT_VERSION:
            raise CorruptionError(f"unsupported format version {header.format_version}")
        if header.page_size != config.page_size:
            raise StoreError(f"page size mismatch: file {header.page_size}, config {config.page_size}")
        if len(raw) < PAGE_SIZE:
            raise CorruptionError("truncated header page")
        unseal(0, raw)
        store = cls(file, config, header)
        store._load_tables()
        if not header.clean:
            if config.on_unclean != "verify":
                raise UncleanShutdownError("database was not cleanly flushed")
            try:
                store.check(deep=True)
            except (AssertionError, CorruptionError) as e:
                raise UncleanShutdownError(f"unclean database failed verification: {e}") from e
            log.warning("database was not cleanly flushed; structural verification passed")
        return store

    def _load_tables(self) -> None:
        pid, prev, seen = self.header.table_list_head, NIL, set()
        while pid != NIL:
            if pid in seen:
                raise CorruptionError("cycle in table list")
            seen.add(pid)
            desc = self.cache.get(pid)
            if not isinstance(desc, DescriptorPage):
                raise CorruptionError(f"table list entry {pid} is not a descriptor page")
            if desc.prev != prev:
                raise CorruptionError(f"table list back link broken at page {pid}")
            self.cache.pin(pid)
            self.tables_by_name[desc.name] = _Table(desc, BTree(self.cache, desc))
            prev, pid = pid, desc.next
        if prev != self.header.table_list_tail:
            raise CorruptionError("table list tail mismatch")

    def close(self, flush: bool = True) -> None:
        if self.closed:
            return
        if flush and not self.cache.read_only:
            self.flush()
        self.file.close()
        self.closed = True

    def abandon(self) -> None:
        """Drop the handle without writing anything (simulated crash)."""
        self.file.close()
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- op bracketing -----------------------------------------------------------
    def _begin(self, name: str) -> None:
        if self.closed:
            raise StoreError("store is closed")
        self.cache.cause = "op:" + name

    def _end(self) -> None:
        try:
            self.cache.maybe_evict()
        finally:
            self.cache.cause = None

    def _allocate_guard(self) -> None:
        limit = self.config.max_pages
        if limit is not None and self.header.free_list_head == NIL and self.header.page_count >= limit:
            raise OutOfPagesError(f"database reached max_pages={limit}")

    # --- tables --------------------------------------------------------------------
    def _table(self, name: str) -> _Table:
        t = self.tables_by_name.get(name)
        if t is None:
            raise UnknownTableError(name)
        return t

    def tables(self) -> list[str]:
        """Table names in list order."""
        out, pid = [], self.header.table_list_head
        while pid != NIL:
            desc = self.cache.get(pid)
            out.append(desc.name)
            pid = desc.next
        return out

    def table(self, name: str) -> TableInfo:
        d = self._table(name).desc
        return TableInfo(d.name, d.schema, d.row_count, d.index_root, d.height, d.page_id)

    def has_table(self, name: str) -> bool:
        return name in self.tables_by_name

    def create_table(self, name: str, schema: Schema) -> TableInfo:
        if name in self.tables_by_name:
            raise DuplicateTableError(f"table {name!r} already exists")
        if not name or len(name.encode()) > 255:
            raise StoreError("table name must be 1..255 bytes")
        self._begin("create_table")
        try:
            self._allocate_guard()
            desc = DescriptorPage(0, name, schema)
            if len(desc.payload()) > PAYLOAD:
                raise StoreError("schema too large for a descriptor page")
            desc.page_id = self.cache.allocate()
            self.cache.install(desc)
            self.cache.pin(desc.page_id)
            tree = BTree.create(self.cache, desc)
            h = self.header
            desc.prev = h.table_list_tail
            if h.table_list_tail != NIL:
                tail = self.cache.get(h.table_list_tail)
                tail.next = desc.page_id
                tail.dirty = True
            else:
                h.table_list_head = desc.page_id
            h.table_list_tail = desc.page_id
            self.cache.header_dirty = True
            self.tables_by_name[name] = _Table(desc, tree)
        finally:
            self._end()
        return self.table(name)

    # --- records -------------------------------------------------------------------
    def _read_record(self, loc) -> bytes:
        page = self.cache.get(loc[0])
        if not isinstance(page, DataPage):
            raise CorruptionError(f"index points at non-data page {loc[0]}")
        try:
            rec = page.records[loc[1]]
        except IndexError:
            rec = None
        if rec is None:
            raise CorruptionError(f"index points at empty slot {loc}")
        if rec[0] == _INLINE:
            return rec[1:]
        head = int.from_bytes(rec[1:9], "little")
        total = int.from_bytes(rec[9:13], "little")
        parts, pid = [], head
        while pid != NIL:
            ov = self.cache.get(pid)
            if not isinstance(ov, OverflowPage):
                raise CorruptionError(f"overflow chain reaches page {pid} of another kind")
            parts.append(ov.chunk)
            pid = ov.next
        data = b"".join(parts)
        if len(data) != total:
            raise CorruptionError(f"overflow chain length {len(data)} != {total}")
        return data

    def _make_record(self, data: bytes) -> bytes:
        if len(data) + 1 <= INLINE_MAX:
            return b"\x00" + data
        pids = []
        for _ in range(0, len(data), OVERFLOW_CHUNK):
            self._allocate_guard()
            pids.append(self.cache.allocate())
        for i, pid in enumerate(pids):
            nxt = pids[i + 1] if i + 1 < len(pids) else NIL
            chunk = data[i * OVERFLOW_CHUNK:(i + 1) * OVERFLOW_CHUNK]
            self.cache.install(OverflowPage(pid, chunk, nxt))
        return b"\x01" + pids[0].to_bytes(8, "little") + len(data).to_bytes(4, "little")

    def _free_record(self, rec: bytes) -> None:
        if rec[0] != _OVERFLOW:
            return
        pid = int.from_bytes(rec[1:9], "little")
        while pid != NIL:
            ov = self.cache.get(pid)
            nxt = ov.next
            self.cache.release(pid)
            pid = nxt

    def _place(self, t: _Table, key: bytes, rec: bytes, avoid: int = NIL):
        """Store a record near its key neighbours; returns its location."""
        candidates = []
        for loc in t.tree.neighbours(key):
            if loc is not None:
                candidates.append(loc[0])
        candidates.append(t.desc.data_hint)
        for pid in candidates:
            if pid == NIL or pid == avoid:
                continue
            page = self.cache.get(pid)
            if isinstance(page, DataPage) and page.room_for(len(rec)):
                slot = page.add(rec)
                page.dirty = True
                return pid, slot
        self._allocate_guard()
        page = self.cache.install(DataPage(self.cache.allocate()))
        slot = page.add(rec)
        t.desc.data_hint = page.page_id
        t.desc.dirty = True
        return page.page_id, slot

    def _remove_slot(self, t: _Table, loc) -> None:
        page = self.cache.get(loc[0])
        page.remove(loc[1])
        page.dirty = True
        if not page.records:
            if t.desc.data_hint == page.page_id:
                t.desc.data_hint = NIL
                t.desc.dirty = True
            self.cache.release(page.page_id)

    # --- base-table operations (no transaction) --------------------------------------
    def _encode(self, t: _Table, row: Sequence[Any]) -> bytes:
        try:
            return encode_row(t.desc.schema, row)
        except DataModelError as e:
            raise SchemaMismatchError(str(e)) from e

    def _base_get(self, t: _Table, key: bytes):
        loc = t.tree.find(key)
        if loc is None:
            return None
        return decode_row(t.desc.schema, self._read_record(loc))

    def _base_upsert(self, t: _Table, key: bytes, data: bytes) -> Outcome:
        loc = t.tree.find(key)
        if loc is None:
            rec = self._make_record(data)
            new_loc = self._place(t, key, rec)
            t.tree.insert(key, new_loc)
            t.desc.row_count += 1
            t.desc.dirty = True
            return Outcome.INSERTED
        page = self.cache.get(loc[0])
        old = page.records[loc[1]]
        if old[0] == _INLINE and len(data) + 1 <= INLINE_MAX:
            rec = b"\x00" + data
            if page.replace(loc[1], rec):
                page.dirty = True
                return Outcome.UPDATED
        else:
            self._free_record(old)
            rec = self._make_record(data)
            if page.replace(loc[1], rec):
                page.dirty = True
                return Outcome.UPDATED
        # the row no longer fits its page: move it elsewhere and repoint the index
        self._remove_slot(t, loc)
        new_loc = self._place(t, key, rec, avoid=loc[0])
        t.tree.set_location(key, new_loc)
        return Outcome.UPDATED

    def _base_delete(self, t: _Table, key: bytes) -> bool:
        loc = t.tree.delete(key)
        if loc is None:
            return False
        page = self.cache.get(loc[0])
        self._free_record(page.records[loc[1]])
        self._remove_slot(t, loc)
        t.desc.row_count -= 1
        t.desc.dirty = True
        return True

    # --- public operations --------------------------------------------------------------
    def upsert(self, table: str, key: bytes, row: Sequence[Any], txn: Txn | None = None) -> Outcome:
        t = self._table(table)
        key = _key(key)
        data = self._encode(t, row)
        if txn is not None:
            txn._check_active()
            buf = txn._buffer(table)
            if key in buf:
                existed = buf[key] is not TOMBSTONE
            else:
                existed = t.tree.find(key) is not None
            buf[key] = tuple(row)
            return Outcome.UPDATED if existed else Outcome.INSERTED
        self._begin("upsert")
        try:
            return self._base_upsert(t, key, data)
        finally:
            self._end()

    def get(self, table: str, key: bytes, txn: Txn | None = None):
        t = self._table(table)
        key = bytes(key)
        if txn is not None:
            txn._check_active()
            buf = txn.writes.get(table)
            if buf is not None and key in buf:
                v = buf[key]
                return None if v is TOMBSTONE else v
        self._begin("get")
        try:
            return self._base_get(t, key)
        finally:
            self._end()

    def delete(self, table: str, key: bytes, txn: Txn | None = None) -> bool:
        t = self._table(table)
        key = bytes(key)
        if txn is not None:
            txn._check_active()
            buf = txn._buffer(table)
            if key in buf:
                existed = buf[key] is not TOMBSTONE
            else:
                existed = t.tree.find(key) is not None
            buf[key] = TOMBSTONE
            return existed
        self._begin("delete")
        try:
            return self._base_delete(t, key)
        finally:
            self._end()

    def range_scan(self, table: str, lo: bytes | None = None, hi: bytes | None = None,
                   direction: Direction | str = Direction.FORWARD, limit: int | None = None,
                   txn: Txn | None = None) -> list[tuple[bytes, tuple]]:
        t = self._table(table)
        direction = Direction(direction)
        if lo is not None and hi is not None and lo > hi:
            raise StoreError("inverted range: lo > hi")
        if limit is not None and limit <= 0:
            return []
        reverse = direction is Direction.BACKWARD
        schema = t.desc.schema
        buf = None
        if txn is not None:
            txn._check_active()
            buf = txn.writes.get(table)
        self._begin("range_scan")
        try:
            base = t.tree.iterate(lo, hi, reverse)
            out: list[tuple[bytes, tuple]] = []
            if not buf:
                for k, loc in base:
                    out.append((k, decode_row(schema, self._read_record(loc))))
                    if limit is not None and len(out) >= limit:
                        break
                return out
            pending = sorted((k for k in buf if (lo is None or k >= lo) and (hi is None or k <= hi)),
                             reverse=reverse)
            return self._merge(base, pending, buf, schema, reverse, limit)
        finally:
            self._end()

    def _merge(self, base, pending, buf, schema, reverse, limit):
        out = []
        before = (lambda a, b: a > b) if reverse else (lambda a, b: a < b)
        j = 0

        def emit(k, v):
            if v is not TOMBSTONE:
                out.append((k, v))
            return limit is not None and len(out) >= limit

        for k, loc in base:
            while j < len(pending) and before(pending[j], k):
                if emit(pending[j], buf[pending[j]]):
                    return out
                j += 1
            if j < len(pending) and pending[j] == k:
                j += 1
                if emit(k, buf[k]):
                    return out
                continue
            if emit(k, decode_row(schema, self._read_record(loc))):
                return out
        while j < len(pending):
            if emit(pending[j], buf[pending[j]]):
                return out
            j += 1
        return out

    def delete_range(self, table: str, lo: bytes | None = None, hi: bytes | None = None) -> int:
        """Delete every key in [lo, hi]; plain in-place deletes, no compaction."""
        t = self._table(table)
        self._begin("delete_range")
        try:
            keys = [k for k, _ in t.tree.iterate(lo, hi)]
            for k in keys:
                self._base_delete(t, k)
            return len(keys)
        finally:
            self._end()

    def upsert_many(self, table: str, items: Iterable[tuple[bytes, Sequence[Any]]]) -> int:
        """Batch insertion under one operation bracket."""
        t = self._table(table)
        prepared = [(_key(k), self._encode(t, row)) for k, row in items]
        self._begin("upsert_many")
        try:
            for k, data in prepared:
                self._base_upsert(t, k, data)
            return len(prepared)
        finally:
            self._end()

    # --- transactions --------------------------------------------------------------------
    def begin_txn(self) -> Txn:
        return Txn(self, next(self._txn_ids))

    def commit(self, txn: Txn) -> None:
        txn._check_active()
        prepared = []
        for table, buf in txn.writes.items():
            t = self._table(table)
            for k in sorted(buf):
                v = buf[k]
                prepared.append((t, k, None if v is TOMBSTONE else self._encode(t, v)))
        self._begin("commit")
        try:
            for t, k, data in prepared:
                if data is None:
                    self._base_delete(t, k)
                else:
                    self._base_upsert(t, k, data)
        finally:
            self._end()
        txn.state = TxnState.COMMITTED

    def rollback(self, txn: Txn) -> None:
        txn._check_active()
        txn.writes.clear()
        txn.state = TxnState.ROLLED_BACK

    # --- cache / durability ----------------------------------------------------------------
    def flush(self) -> int:
        if self.closed:
            raise StoreError("store is closed")
        return self.cache.flush()

    def evict_to(self, target_pages: int) -> int:
        self.cache.cause = "op:evict_to"
        try:
            return self.cache.evict_to(target_pages)
        finally:
            self.cache.cause = None

    @property
    def stats(self):
        return self.cache.stats

    def location(self, table: str, key: bytes):
        """Data location (page_id, slot) of a key, or None."""
        return self._table(table).tree.find(bytes(key))

    # --- verification and dumps --------------------------------------------------------------
    def check(self, deep: bool = False) -> None:
        """Assert structural invariants of every table; ``deep`` also reads
        every row and walks the free list."""
        for t in self.tables_by_name.values():
            t.tree.check()
            if deep:
                for _, loc in t.tree.iterate():
                    decode_row(t.desc.schema, self._read_record(loc))
        if deep:
            pid, n = self.header.free_list_head, 0
            while pid != NIL:
                page = self.cache.get(pid)
                if not isinstance(page, FreePage):
                    raise CorruptionError(f"free list reaches non-free page {pid}")
                n += 1
                if n > self.header.page_count:
                    raise CorruptionError("cycle in free list")
                pid = page.next

    def dump(self) -> dict[str, list[tuple[bytes, tuple]]]:
        """Logical contents: table name -> sorted (key, row) list, plus schemas."""
        out = {}
        for name in self.tables():
            out[name] = self.range_scan(name)
        return out

    def schemas(self) -> dict[str, Schema]:
        return {name: self._table(name).desc.schema for name in self.tables()}

    def verify_checksums(self) -> list[int]:
        """Page ids whose on-disk checksum fails (reads the file directly)."""
        bad = []
        size = self.file.size()
        for pid in range(0, min(self.header.page_count, size // PAGE_SIZE)):
            raw = self.file.read_at(pid * PAGE_SIZE, PAGE_SIZE)
            try:
                unseal(pid, raw)
            except ChecksumError:
                bad.append(pid)
        return bad


def open_database(path=None, config: StoreConfig | None = None, **overrides) -> Store:
    return Store.open(path, config, **overrides)
