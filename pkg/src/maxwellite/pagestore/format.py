"""On-disk page formats and the raw page file.

Every page is ``PAGE_SIZE`` bytes: a 4-byte CRC32C of the rest of the page,
a kind byte, 3 reserved bytes, then the kind-specific payload. Page 0 is the
file header. All integers are little endian; page id 0 doubles as NIL.
"""
from __future__ import annotations

import enum
import os
import struct

import crc32c

from ..datamodel import Schema

PAGE_SIZE = 4096
PAGE_HEADER = 8
PAYLOAD = PAGE_SIZE - PAGE_HEADER
NIL = 0

MAGIC = b"MXWLITE\x00"
FORMAT_VERSION = 1


class StoreError(Exception):
    pass


class CorruptionError(StoreError):
    pass


class ChecksumError(CorruptionError):
    def __init__(self, page_id: int, message: str = ""):
        super().__init__(message or f"checksum mismatch on page {page_id}")
        self.page_id = page_id


class PageKind(enum.IntEnum):
    HEADER = 0
    TABLE_DESCRIPTOR = 1
    INDEX_INTERNAL = 2
    INDEX_LEAF = 3
    DATA = 4
    FREE = 5
    OVERFLOW = 6


def seal(kind: PageKind, payload: bytes, page_size: int = PAGE_SIZE) -> bytes:
    """Frame a payload as a full page with checksum."""
    body_len = page_size - 4
    if len(payload) > body_len - 4:
        raise StoreError(f"payload of {len(payload)} bytes does not fit a page")
    body = bytes((kind, 0, 0, 0)) + payload
    body += bytes(body_len - len(body))
    return crc32c.crc32c(body).to_bytes(4, "little") + body


def unseal(page_id: int, raw: bytes) -> tuple[PageKind, memoryview]:
    if int.from_bytes(raw[:4], "little") != crc32c.crc32c(raw[4:]):
        raise ChecksumError(page_id)
    try:
        kind = PageKind(raw[4])
    except ValueError:
        raise CorruptionError(f"page {page_id}: unknown kind {raw[4]}") from None
    return kind, memoryview(raw)[PAGE_HEADER:]


# --- file backends -----------------------------------------------------------

class OsFile:
    """Positional IO over a regular file descriptor."""

    def __init__(self, path: str | os.PathLike, create: bool):
        flags = os.O_RDWR | (os.O_CREAT if create else 0)
        self.path = os.fspath(path)
        self.fd = os.open(self.path, flags, 0o644)

    def read_at(self, offset: int, n: int) -> bytes:
        return os.pread(self.fd, n, offset)

    def write_at(self, offset: int, data: bytes) -> None:
        view = memoryview(data)
        while view:
            written = os.pwrite(self.fd, view, offset)
            view = view[written:]
            offset += written

    def size(self) -> int:
        return os.fstat(self.fd).st_size

    def sync(self) -> None:
        # data plus the size change; timestamps need not be durable
        (getattr(os, "fdatasync", None) or os.fsync)(self.fd)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


class MemFile:
    """In-memory stand-in for a database file (tests, simulation)."""

    def __init__(self, data: bytes | bytearray = b""):
        self.buf = bytearray(data)
        self.closed = False

    def read_at(self, offset: int, n: int) -> bytes:
        return bytes(self.buf[offset:offset + n])

    def write_at(self, offset: int, data: bytes) -> None:
        end = offset + len(data)
        if end > len(self.buf):
            self.buf.extend(bytes(end - len(self.buf)))
        self.buf[offset:end] = data

    def size(self) -> int:
        return len(self.buf)

    def sync(self) -> None:
        pass

    def close(self) -> None:
        self.closed = True


# --- header ------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIQQQQBQQ")


class FileHeader:
    __slots__ = ("magic", "format_version", "page_size", "table_list_head", "table_list_tail",
                 "free_list_head", "page_count", "clean", "flush_epoch", "free_count")

    def __init__(self, page_size: int = PAGE_SIZE):
        self.magic = MAGIC
        self.format_version = FORMAT_VERSION
        self.page_size = page_size
        self.table_list_head = NIL
        self.table_list_tail = NIL
        self.free_list_head = NIL
        self.page_count = 1
        self.clean = 1
        self.flush_epoch = 0
        self.free_count = 0

    def encode(self) -> bytes:
        payload = _HEADER.pack(self.magic, self.format_version, self.page_size, self.table_list_head,
                               self.table_list_tail, self.free_list_head, self.page_count, self.clean,
                               self.flush_epoch, self.free_count)
        return seal(PageKind.HEADER, payload, self.page_size)

    @classmethod
    def decode(cls, raw: bytes) -> "FileHeader":
        if len(raw) < 64:
            raise CorruptionError("file too short for a header page")
        # magic, version and page size sit at fixed offsets so they can be
        # reported before the checksum (which depends on page size) is known.
        h = cls()
        (h.magic, h.format_version, h.page_size, h.table_list_head, h.table_list_tail,
         h.free_list_head, h.page_count, h.clean, h.flush_epoch, h.free_count) = _HEADER.unpack_from(raw, PAGE_HEADER)
        return h


# --- page objects ------------------------------------------------------------

class Page:
    kind: PageKind
    __slots__ = ("page_id", "dirty")

    def __init__(self, page_id: int):
        self.page_id = page_id
        self.dirty = False

    def payload(self) -> bytes:
        raise NotImplementedError

    def encode(self) -> bytes:
        return seal(self.kind, self.payload())


class FreePage(Page):
    kind = PageKind.FREE
    __slots__ = ("next",)

    def __init__(self, page_id: int, next: int = NIL):
        super().__init__(page_id)
        self.next = next

    def payload(self) -> bytes:
        return self.next.to_bytes(8, "little")

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "FreePage":
        return cls(page_id, int.from_bytes(body[:8], "little"))


_DESC = struct.Struct("<QQQQQQ")


class DescriptorPage(Page):
    """One table: name, schema, B+ tree root and list links."""

    kind = PageKind.TABLE_DESCRIPTOR
    __slots__ = ("name", "schema", "index_root", "prev", "next", "row_count", "height", "data_hint")

    def __init__(self, page_id: int, name: str, schema: Schema):
        super().__init__(page_id)
        self.name = name
        self.schema = schema
        self.index_root = NIL
        self.prev = NIL
        self.next = NIL
        self.row_count = 0
        self.height = 1
        self.data_hint = NIL

    def payload(self) -> bytes:
        name = self.name.encode()
        return (_DESC.pack(self.index_root, self.prev, self.next, self.row_count, self.height, self.data_hint)
                + len(name).to_bytes(2, "little") + name + self.schema.to_bytes())

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "DescriptorPage":
        root, prev, nxt, rows, height, hint = _DESC.unpack_from(body, 0)
        pos = _DESC.size
        ln = int.from_bytes(body[pos:pos + 2], "little")
        pos += 2
        name = bytes(body[pos:pos + ln]).decode()
        schema, _ = Schema.from_bytes(body, pos + ln)
        d = cls(page_id, name, schema)
        d.index_root, d.prev, d.next, d.row_count, d.height, d.data_hint = root, prev, nxt, rows, height, hint
        return d


# Leaf layout: u16 n, u64 prev, u64 next, then n x (u16 klen, key, u64 page, u16 slot).
LEAF_HEADER = 18
LEAF_ENTRY = 12          # per-entry overhead besides the key bytes
# Internal layout: u16 n, u64 child0, then n x (u16 klen, key, u64 child).
INTERNAL_HEADER = 10
INTERNAL_ENTRY = 10

_LOC = struct.Struct("<QH")


class LeafPage(Page):
    kind = PageKind.INDEX_LEAF
    __slots__ = ("keys", "locs", "prev", "next", "used")

    def __init__(self, page_id: int):
        super().__init__(page_id)
        self.keys: list[bytes] = []
        self.locs: list[tuple[int, int]] = []
        self.prev = NIL
        self.next = NIL
        self.used = LEAF_HEADER

    def recount(self) -> None:
        self.used = LEAF_HEADER + sum(len(k) for k in self.keys) + LEAF_ENTRY * len(self.keys)

    def payload(self) -> bytes:
        out = [struct.pack("<HQQ", len(self.keys), self.prev, self.next)]
        for k, loc in zip(self.keys, self.locs):
            out.append(len(k).to_bytes(2, "little"))
            out.append(k)
            out.append(_LOC.pack(*loc))
        return b"".join(out)

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "LeafPage":
        leaf = cls(page_id)
        n, leaf.prev, leaf.next = struct.unpack_from("<HQQ", body, 0)
        pos = LEAF_HEADER
        keys, locs = leaf.keys, leaf.locs
        for _ in range(n):
            ln = body[pos] | (body[pos + 1] << 8)
            pos += 2
            keys.append(bytes(body[pos:pos + ln]))
            pos += ln
            locs.append(_LOC.unpack_from(body, pos))
            pos += 10
        leaf.used = pos
        return leaf


class InternalPage(Page):
    kind = PageKind.INDEX_INTERNAL
    __slots__ = ("keys", "children", "used")

    def __init__(self, page_id: int):
        super().__init__(page_id)
        self.keys: list[bytes] = []
        self.children: list[int] = []
        self.used = INTERNAL_HEADER

    def recount(self) -> None:
        self.used = INTERNAL_HEADER + sum(len(k) for k in self.keys) + INTERNAL_ENTRY * len(self.keys)

    def payload(self) -> bytes:
        out = [struct.pack("<HQ", len(self.keys), self.children[0])]
        for k, c in zip(self.keys, self.children[1:]):
            out.append(len(k).to_bytes(2, "little"))
            out.append(k)
            out.append(c.to_bytes(8, "little"))
        return b"".join(out)

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "InternalPage":
        node = cls(page_id)
        n, c0 = struct.unpack_from("<HQ", body, 0)
        node.children.append(c0)
        pos = INTERNAL_HEADER
        for _ in range(n):
            ln = body[pos] | (body[pos + 1] << 8)
            pos += 2
            node.keys.append(bytes(body[pos:pos + ln]))
            pos += ln
            node.children.append(int.from_bytes(body[pos:pos + 8], "little"))
            pos += 8
        node.used = pos
        return node


# Data page layout: u16 nslots, then nslots x (u16 offset, u16 length) slot
# directory; record bytes are packed from the end of the page backwards.
# Offset 0 marks an empty slot. Freed space is reclaimed inside the page on
# every write-out; nothing ever moves records between pages.
DATA_HEADER = 2
SLOT_SIZE = 4


class DataPage(Page):
    kind = PageKind.DATA
    __slots__ = ("records", "used")

    def __init__(self, page_id: int):
        super().__init__(page_id)
        self.records: list[bytes | None] = []
        self.used = DATA_HEADER

    @property
    def free(self) -> int:
        return PAYLOAD - self.used

    def live(self) -> int:
        return sum(1 for r in self.records if r is not None)

    def room_for(self, size: int) -> bool:
        extra = 0 if None in self.records else SLOT_SIZE
        return self.used + size + extra <= PAYLOAD

    def add(self, record: bytes) -> int:
        try:
            slot = self.records.index(None)
            self.records[slot] = record
            self.used += len(record)
        except ValueError:
            slot = len(self.records)
            self.records.append(record)
            self.used += len(record) + SLOT_SIZE
        return slot

    def replace(self, slot: int, record: bytes) -> bool:
        old = self.records[slot]
        delta = len(record) - len(old)
        if self.used + delta > PAYLOAD:
            return False
        self.records[slot] = record
        self.used += delta
        return True

    def remove(self, slot: int) -> None:
        old = self.records[slot]
        self.records[slot] = None
        self.used -= len(old)
        while self.records and self.records[-1] is None:
            self.records.pop()
            self.used -= SLOT_SIZE

    def payload(self) -> bytes:
        n = len(self.records)
        directory = bytearray(n.to_bytes(2, "little"))
        body = bytearray(PAYLOAD)
        end = len(body)
        for rec in self.records:
            if rec is None:
                directory += b"\x00\x00\x00\x00"
                continue
            end -= len(rec)
            body[end:end + len(rec)] = rec
            directory += struct.pack("<HH", end, len(rec))
        body[:len(directory)] = directory
        return bytes(body)

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "DataPage":
        page = cls(page_id)
        n = int.from_bytes(body[:2], "little")
        used = DATA_HEADER + SLOT_SIZE * n
        for i in range(n):
            off, ln = struct.unpack_from("<HH", body, DATA_HEADER + SLOT_SIZE * i)
            if off == 0:
                page.records.append(None)
            else:
                if off + ln > len(body):
                    raise CorruptionError(f"data page {page_id}: slot {i} out of bounds")
                page.records.append(bytes(body[off:off + ln]))
                used += ln
        page.used = used
        return page


OVERFLOW_CHUNK = PAYLOAD - 4 - 12


class OverflowPage(Page):
    """One link of a chain holding a row too large for a data page."""

    kind = PageKind.OVERFLOW
    __slots__ = ("next", "chunk")

    def __init__(self, page_id: int, chunk: bytes = b"", next: int = NIL):
        super().__init__(page_id)
        self.chunk = chunk
        self.next = next

    def payload(self) -> bytes:
        return struct.pack("<QI", self.next, len(self.chunk)) + self.chunk

    @classmethod
    def decode(cls, page_id: int, body: memoryview) -> "OverflowPage":
        nxt, ln = struct.unpack_from("<QI", body, 0)
        if ln > OVERFLOW_CHUNK:
            raise CorruptionError(f"overflow page {page_id}: bad length {ln}")
        return cls(page_id, bytes(body[12:12 + ln]), nxt)


DECODERS = {
    PageKind.FREE: FreePage.decode,
    PageKind.TABLE_DESCRIPTOR: DescriptorPage.decode,
    PageKind.INDEX_LEAF: LeafPage.decode,
    PageKind.INDEX_INTERNAL: InternalPage.decode,
    PageKind.DATA: DataPage.decode,
    PageKind.OVERFLOW: OverflowPage.decode,
}


def decode_page(page_id: int, raw: bytes) -> Page:
    kind, body = unseal(page_id, raw)
    if kind is PageKind.HEADER:
        raise CorruptionError(f"page {page_id} is a header page")
    return DECODERS[kind](page_id, body)
