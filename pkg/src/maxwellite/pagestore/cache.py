"""Page file access plus the hot-page cache sitting in front of it."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .format import (NIL, PAGE_SIZE, CorruptionError, FileHeader, FreePage, Page, StoreError,
                     decode_page)


@dataclass
class IoStats:
    page_reads: int = 0
    page_writes: int = 0
    header_writes: int = 0
    syncs: int = 0
    checksum_errors: int = 0
    evictions: int = 0
    # cause -> number of page writes; causes are "flush" or "op:<name>"
    writes_by_cause: dict = field(default_factory=dict)
    background_writes: int = 0


class EvictionPolicy:
    """Chooses victims among unpinned cached pages."""

    def touch(self, page_id: int) -> None:
        raise NotImplementedError

    def admit(self, page_id: int) -> None:
        raise NotImplementedError

    def forget(self, page_id: int) -> None:
        raise NotImplementedError

    def candidates(self):
        """Yield page ids from most to least evictable."""
        raise NotImplementedError


class LruPolicy(EvictionPolicy):
    def __init__(self):
        self._order: OrderedDict[int, None] = OrderedDict()

    def touch(self, page_id):
        self._order.move_to_end(page_id)

    def admit(self, page_id):
        self._order[page_id] = None

    def forget(self, page_id):
        self._order.pop(page_id, None)

    def candidates(self):
        return iter(list(self._order))


class ScanResistantPolicy(EvictionPolicy):
    """Two-queue LRU: pages touched once live in a probation queue and are
    evicted first, so a long range scan cannot flush the hot set."""

    def __init__(self):
        self._probation: OrderedDict[int, None] = OrderedDict()
        self._protected: OrderedDict[int, None] = OrderedDict()

    def touch(self, page_id):
        if page_id in self._probation:
            del self._probation[page_id]
            self._protected[page_id] = None
        else:
            self._protected.move_to_end(page_id)

    def admit(self, page_id):
        self._probation[page_id] = None

    def forget(self, page_id):
        self._probation.pop(page_id, None)
        self._protected.pop(page_id, None)

    def candidates(self):
        return iter(list(self._probation) + list(self._protected))


POLICIES = {"lru": LruPolicy, "scan-resistant": ScanResistantPolicy}


class PageCache:
    """Write-back cache of decoded pages over a page file.

    Pages are modified in memory and written back in place when evicted or
    flushed. The on-disk header carries a clean flag: it is cleared (and
    synced) before the first in-place write after a flush and set again once a
    flush completes, so a reopened file always knows whether it is exactly a
    flushed state.
    """

    def __init__(self, file, header: FileHeader, capacity: int, policy: str = "lru"):
        if capacity < 8:
            raise StoreError("cache capacity must be at least 8 pages")
        self.file = file
        self.header = header
        self.capacity = capacity
        self.policy: EvictionPolicy = POLICIES[policy]()
        self.pages: dict[int, Page] = {}
        self.pins: dict[int, int] = {}
        self.stats = IoStats()
        self.cause = None
        self.read_only = False
        self.header_dirty = False
        self._disk_clean = bool(header.clean)

    # --- raw IO ----------------------------------------------------------------
    def read_raw(self, page_id: int) -> bytes:
        raw = self.file.read_at(page_id * PAGE_SIZE, PAGE_SIZE)
        if len(raw) != PAGE_SIZE:
            raise CorruptionError(f"page {page_id} beyond end of file")
        self.stats.page_reads += 1
        return raw

    def _write_raw(self, page_id: int, raw: bytes) -> None:
        if self.read_only:
            raise StoreError("store is read-only after an IO failure")
        if self._disk_clean:
            self._mark_disk_unclean()
        try:
            self.file.write_at(page_id * PAGE_SIZE, raw)
        except OSError as e:
            self.read_only = True
            raise StoreError(f"write of page {page_id} failed: {e}") from e
        st = self.stats
        st.page_writes += 1
        if self.cause is None:
            st.background_writes += 1
        else:
            st.writes_by_cause[self.cause] = st.writes_by_cause.get(self.cause, 0) + 1

    def _mark_disk_unclean(self) -> None:
        self.header.clean = 0
        self._write_header()
        self._sync()
        self._disk_clean = False

    def _write_header(self) -> None:
        try:
            self.file.write_at(0, self.header.encode())
        except OSError as e:
            self.read_only = True
            raise StoreError(f"header write failed: {e}") from e
        self.stats.header_writes += 1

    def _sync(self) -> None:
        try:
            self.file.sync()
        except OSError as e:
            self.read_only = True
            raise StoreError(f"fsync failed: {e}") from e
        self.stats.syncs += 1

    # --- cache -----------------------------------------------------------------
    def get(self, page_id: int) -> Page:
        page = self.pages.get(page_id)
        if page is not None:
            self.policy.touch(page_id)
            return page
        if not 0 < page_id < self.header.page_count:
            raise CorruptionError(f"page id {page_id} out of range")
        try:
            page = decode_page(page_id, self.read_raw(page_id))
        except CorruptionError:
            self.stats.checksum_errors += 1
            raise
        self.pages[page_id] = page
        self.policy.admit(page_id)
        return page

    def install(self, page: Page) -> Page:
        """Put a freshly built page in the cache, dirty."""
        page.dirty = True
        self.pages[page.page_id] = page
        self.policy.admit(page.page_id)
        return page

    def dirty(self, page: Page) -> None:
        page.dirty = True

    def pin(self, page_id: int) -> None:
        self.get(page_id)
        self.pins[page_id] = self.pins.get(page_id, 0) + 1

    def unpin(self, page_id: int) -> None:
        n = self.pins.get(page_id, 0)
        if n <= 1:
            self.pins.pop(page_id, None)
        else:
            self.pins[page_id] = n - 1

    # --- allocation --------------------------------------------------------------
    def allocate(self) -> int:
        h = self.header
        if h.free_list_head != NIL:
            pid = h.free_list_head
            page = self.get(pid)
            if not isinstance(page, FreePage):
                raise CorruptionError(f"free list points at non-free page {pid}")
            h.free_list_head = page.next
            h.free_count -= 1
            self._drop(pid)
        else:
            pid = h.page_count
            h.page_count += 1
        self.header_dirty = True
        return pid

    def release(self, page_id: int) -> None:
        h = self.header
        self._drop(page_id)
        self.install(FreePage(page_id, h.free_list_head))
        h.free_list_head = page_id
        h.free_count += 1
        self.header_dirty = True

    def _drop(self, page_id: int) -> None:
        self.pages.pop(page_id, None)
        self.pins.pop(page_id, None)
        self.policy.forget(page_id)

    # --- write-back ----------------------------------------------------------------
    def write_back(self, page: Page) -> None:
        self._write_raw(page.page_id, page.encode())
        page.dirty = False

    def evict_to(self, target: int) -> int:
        if target < len(self.pins):
            raise StoreError(f"cannot shrink cache below {len(self.pins)} pinned pages")
        evicted = 0
        if len(self.pages) <= target:
            return 0
        for pid in self.policy.candidates():
            if len(self.pages) <= target:
                break
            if pid in self.pins:
                continue
            page = self.pages[pid]
            if page.dirty:
                self.write_back(page)
            self._drop(pid)
            evicted += 1
        self.stats.evictions += evicted
        return evicted

    def maybe_evict(self) -> int:
        if len(self.pages) > self.capacity:
            return self.evict_to(max(self.capacity, len(self.pins)))
        return 0

    def dirty_pages(self) -> list[Page]:
        return [p for p in self.pages.values() if p.dirty]

    def flush(self) -> int:
        """Write every dirty page, sync, then publish a clean header."""
        dirty = sorted(self.dirty_pages(), key=lambda p: p.page_id)
        if not dirty and not self.header_dirty and self._disk_clean:
            return 0
        prev, self.cause = self.cause, "flush"
        try:
            for page in dirty:
                self.write_back(page)
            if dirty:
                self._sync()
            self.header.clean = 1
            self.header.flush_epoch += 1
            self._write_header()
            self._sync()
        finally:
            self.cause = prev
        self._disk_clean = True
        self.header_dirty = False
        return len(dirty)
