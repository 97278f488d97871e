"""B+ tree over cached index pages.

Leaves map keys to data locations ``(data_page_id, slot)``. Nodes are sized
in bytes: a node splits when its encoding would exceed a page and is
rebalanced (merged or topped up from a sibling) when it drops below a fifth
of a page. Internal separators obey ``keys(child[i]) < keys[i] <= keys(child[i+1])``.
"""
from __future__ import annotations

from bisect import bisect_left, bisect_right

from .format import (INTERNAL_ENTRY, INTERNAL_HEADER, LEAF_ENTRY, LEAF_HEADER, NIL, PAYLOAD,
                     DescriptorPage, InternalPage, LeafPage)

CAPACITY = PAYLOAD
MIN_FILL = PAYLOAD // 5
# Entry-count bounds implied by the byte bounds: a node always holds at
# least one key (two children) and at most what 1-byte keys could pack.
FANOUT_MIN = 2
FANOUT_MAX = (PAYLOAD - INTERNAL_HEADER) // (1 + INTERNAL_ENTRY) + 1


class BTree:
    def __init__(self, cache, desc: DescriptorPage):
        self.cache = cache
        self.desc = desc

    # --- helpers -------------------------------------------------------------
    def _node(self, pid):
        return self.cache.get(pid)

    def _dirty(self, node) -> None:
        node.dirty = True

    def _new_leaf(self) -> LeafPage:
        return self.cache.install(LeafPage(self.cache.allocate()))

    def _new_internal(self) -> InternalPage:
        return self.cache.install(InternalPage(self.cache.allocate()))

    @classmethod
    def create(cls, cache, desc: DescriptorPage) -> "BTree":
        tree = cls(cache, desc)
        desc.index_root = tree._new_leaf().page_id
        desc.height = 1
        desc.dirty = True
        return tree

    def _descend(self, key: bytes):
        """Return (path, leaf): path holds (internal node, child index) pairs."""
        node = self._node(self.desc.index_root)
        path = []
        while isinstance(node, InternalPage):
            i = bisect_right(node.keys, key)
            path.append((node, i))
            node = self._node(node.children[i])
        return path, node

    # --- lookups ---------------------------------------------------------------
    def find(self, key: bytes):
        _, leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            return leaf.locs[i]
        return None

    def neighbours(self, key: bytes):
        """Locations of the entries just before and after ``key`` in its leaf."""
        _, leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        before = leaf.locs[i - 1] if i > 0 else None
        after = leaf.locs[i] if i < len(leaf.keys) else None
        return before, after

    def set_location(self, key: bytes, loc) -> None:
        _, leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        assert leaf.keys[i] == key
        leaf.locs[i] = loc
        leaf.dirty = True

    def iterate(self, lo: bytes | None = None, hi: bytes | None = None, reverse: bool = False):
        """Yield (key, loc) with lo <= key <= hi. The tree must not be mutated
        while the generator is live."""
        if not reverse:
            if lo is None:
                node = self._leftmost()
                i = 0
            else:
                _, node = self._descend(lo)
                i = bisect_left(node.keys, lo)
            while True:
                keys = node.keys
                while i < len(keys):
                    k = keys[i]
                    if hi is not None and k > hi:
                        return
                    yield k, node.locs[i]
                    i += 1
                if node.next == NIL:
                    return
                node = self._node(node.next)
                i = 0
        else:
            if hi is None:
                node = self._rightmost()
                i = len(node.keys) - 1
            else:
                _, node = self._descend(hi)
                i = bisect_right(node.keys, hi) - 1
            while True:
                keys = node.keys
                while i >= 0:
                    k = keys[i]
                    if lo is not None and k < lo:
                        return
                    yield k, node.locs[i]
                    i -= 1
                if node.prev == NIL:
                    return
                node = self._node(node.prev)
                i = len(node.keys) - 1

    def _leftmost(self) -> LeafPage:
        node = self._node(self.desc.index_root)
        while isinstance(node, InternalPage):
            node = self._node(node.children[0])
        return node

    def _rightmost(self) -> LeafPage:
        node = self._node(self.desc.index_root)
        while isinstance(node, InternalPage):
            node = self._node(node.children[-1])
        return node

    # --- insert ------------------------------------------------------------------
    def insert(self, key: bytes, loc) -> bool:
        """Insert or overwrite; returns True when the key was new."""
        path, leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            leaf.locs[i] = loc
            leaf.dirty = True
            return False
        leaf.keys.insert(i, key)
        leaf.locs.insert(i, loc)
        leaf.used += len(key) + LEAF_ENTRY
        leaf.dirty = True
        if leaf.used > CAPACITY:
            self._split_upwards(path, leaf)
        return True

    @staticmethod
    def _best_cut(sizes: list[int], internal: bool) -> int:
        """Most even cut of a run of entries. For leaves the right half starts
        at the cut; for internal nodes the entry at the cut moves up."""
        total = sum(sizes)
        best, best_cost, acc = 1, None, 0
        last = len(sizes) - 1 if internal else len(sizes)
        for cut in range(1, last):
            acc += sizes[cut - 1]
            right = total - acc - (sizes[cut] if internal else 0)
            cost = abs(acc - right)
            if best_cost is None or cost < best_cost:
                best, best_cost = cut, cost
        return best

    def _split_leaf(self, leaf: LeafPage):
        cut = self._best_cut([len(k) + LEAF_ENTRY for k in leaf.keys], internal=False)
        right = self._new_leaf()
        right.keys = leaf.keys[cut:]
        right.locs = leaf.locs[cut:]
        del leaf.keys[cut:]
        del leaf.locs[cut:]
        leaf.recount()
        right.recount()
        right.next = leaf.next
        right.prev = leaf.page_id
        if leaf.next != NIL:
            nxt = self._node(leaf.next)
            nxt.prev = right.page_id
            nxt.dirty = True
        leaf.next = right.page_id
        leaf.dirty = True
        return right.keys[0], right

    def _split_internal(self, node: InternalPage):
        mid = self._best_cut([len(k) + INTERNAL_ENTRY for k in node.keys], internal=True)
        sep = node.keys[mid]
        right = self._new_internal()
        right.keys = node.keys[mid + 1:]
        right.children = node.children[mid + 1:]
        del node.keys[mid:]
        del node.children[mid + 1:]
        node.recount()
        right.recount()
        node.dirty = True
        return sep, right

    def _split_upwards(self, path, node) -> None:
        while node.used > CAPACITY:
            if isinstance(node, LeafPage):
                sep, right = self._split_leaf(node)
            else:
                sep, right = self._split_internal(node)
            if not path:
                root = self._new_internal()
                root.children = [node.page_id, right.page_id]
                root.keys = [sep]
                root.recount()
                self.desc.index_root = root.page_id
                self.desc.height += 1
                self.desc.dirty = True
                return
            parent, idx = path.pop()
            parent.keys.insert(idx, sep)
            parent.children.insert(idx + 1, right.page_id)
            parent.used += len(sep) + INTERNAL_ENTRY
            parent.dirty = True
            node = parent

    # --- delete --------------------------------------------------------------------
    def delete(self, key: bytes):
        """Remove ``key``; returns its location or None when absent."""
        path, leaf = self._descend(key)
        i = bisect_left(leaf.keys, key)
        if i == len(leaf.keys) or leaf.keys[i] != key:
            return None
        loc = leaf.locs.pop(i)
        leaf.keys.pop(i)
        leaf.used -= len(key) + LEAF_ENTRY
        leaf.dirty = True
        self._rebalance(path, leaf)
        return loc

    def _underfull(self, node) -> bool:
        if isinstance(node, LeafPage):
            return node.used < MIN_FILL or not node.keys
        return node.used < MIN_FILL or len(node.children) < 2

    def _rebalance(self, path, node) -> None:
        while path:
            parent, idx = path[-1]
            if node.used > CAPACITY:
                # a longer separator rotated into this node
                path.pop()
                sep, right = (self._split_leaf(node) if isinstance(node, LeafPage)
                              else self._split_internal(node))
                parent.keys.insert(idx, sep)
                parent.children.insert(idx + 1, right.page_id)
                parent.used += len(sep) + INTERNAL_ENTRY
                parent.dirty = True
                node = parent
                continue
            if not self._underfull(node):
                path.pop()
                node = parent
                continue
            if idx > 0:
                left = self._node(parent.children[idx - 1])
                self._fix_pair(parent, idx - 1, left, node)
            else:
                right = self._node(parent.children[1])
                self._fix_pair(parent, 0, node, right)
            path.pop()
            node = parent
        self._fix_root(node)

    def _fix_root(self, root) -> None:
        if root.used > CAPACITY:
            self._split_upwards([], root)
            return
        while isinstance(root, InternalPage) and len(root.children) == 1:
            child = root.children[0]
            self.cache.release(root.page_id)
            self.desc.index_root = child
            self.desc.height -= 1
            self.desc.dirty = True
            root = self._node(child)

    def _fix_pair(self, parent: InternalPage, li: int, left, right) -> None:
        """Merge or redistribute the adjacent children li and li+1 of parent."""
        sep = parent.keys[li]
        if isinstance(left, LeafPage):
            if left.used + right.used - LEAF_HEADER <= CAPACITY:
                left.keys += right.keys
                left.locs += right.locs
                left.recount()
                left.next = right.next
                if right.next != NIL:
                    nxt = self._node(right.next)
                    nxt.prev = left.page_id
                    nxt.dirty = True
                left.dirty = True
                self._remove_child(parent, li)
                self.cache.release(right.page_id)
                return
            keys = left.keys + right.keys
            locs = left.locs + right.locs
            cut = self._best_cut([len(k) + LEAF_ENTRY for k in keys], internal=False)
            left.keys, right.keys = keys[:cut], keys[cut:]
            left.locs, right.locs = locs[:cut], locs[cut:]
            left.recount()
            right.recount()
            new_sep = right.keys[0]
        else:
            if left.used + right.used - INTERNAL_HEADER + len(sep) + INTERNAL_ENTRY <= CAPACITY:
                left.keys += [sep] + right.keys
                left.children += right.children
                left.recount()
                left.dirty = True
                self._remove_child(parent, li)
                self.cache.release(right.page_id)
                return
            keys = left.keys + [sep] + right.keys
            children = left.children + right.children
            mid = self._best_cut([len(k) + INTERNAL_ENTRY for k in keys], internal=True)
            new_sep = keys[mid]
            left.keys, right.keys = keys[:mid], keys[mid + 1:]
            left.children, right.children = children[:mid + 1], children[mid + 1:]
            left.recount()
            right.recount()
        left.dirty = True
        right.dirty = True
        parent.used += len(new_sep) - len(sep)
        parent.keys[li] = new_sep
        parent.dirty = True

    def _remove_child(self, parent: InternalPage, li: int) -> None:
        sep = parent.keys.pop(li)
        parent.children.pop(li + 1)
        parent.used -= len(sep) + INTERNAL_ENTRY
        parent.dirty = True

    # --- verification ------------------------------------------------------------
    def check(self) -> int:
        """Assert every structural invariant; return the number of entries."""
        desc = self.desc
        root = self._node(desc.index_root)
        leaves: list[LeafPage] = []
        self._check_node(root, None, None, 1, leaves, is_root=True)
        prev = NIL
        for leaf in leaves:
            assert leaf.prev == prev, f"leaf {leaf.page_id} prev link {leaf.prev} != {prev}"
            prev = leaf.page_id
        for a, b in zip(leaves, leaves[1:]):
            assert a.next == b.page_id, f"leaf {a.page_id} next link broken"
            if a.keys and b.keys:
                assert a.keys[-1] < b.keys[0], "leaf chain out of key order"
        assert leaves[-1].next == NIL, "last leaf has a next link"
        count = sum(len(l.keys) for l in leaves)
        assert count == desc.row_count, f"row_count {desc.row_count} != {count} index entries"
        return count

    def _check_node(self, node, lo, hi, depth, leaves, is_root=False) -> None:
        keys = node.keys
        for a, b in zip(keys, keys[1:]):
            assert a < b, f"node {node.page_id} keys not strictly ascending"
        if keys:
            assert lo is None or keys[0] >= lo, f"node {node.page_id} key below separator"
            assert hi is None or keys[-1] < hi, f"node {node.page_id} key above separator"
        assert node.used <= CAPACITY, f"node {node.page_id} overflows its page"
        if isinstance(node, LeafPage):
            assert depth == self.desc.height, f"leaf {node.page_id} at depth {depth}, height {self.desc.height}"
            assert len(node.locs) == len(keys)
            if not is_root:
                assert keys and node.used >= MIN_FILL, f"leaf {node.page_id} underfull"
            leaves.append(node)
            return
        n = len(node.children)
        assert n == len(keys) + 1
        assert FANOUT_MIN <= n <= FANOUT_MAX or (is_root and n >= 2), f"node {node.page_id} fanout {n}"
        if not is_root:
            assert node.used >= MIN_FILL, f"internal {node.page_id} underfull"
        bounds = [lo] + keys + [hi]
        for i, c in enumerate(node.children):
            self._check_node(self._node(c), bounds[i], bounds[i + 1], depth + 1, leaves)
