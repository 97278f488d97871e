"""Global observer that checks Raft's safety properties while a trace runs.

* election safety: at most one leader per term;
* log matching: two logs agreeing on (index, term) agree on the whole prefix;
* leader completeness: a new leader holds every entry committed so far;
* state-machine safety: no two replicas apply different entries at an index.
"""
from __future__ import annotations


class SafetyChecker:
    def __init__(self):
        self.leaders: dict[int, int] = {}
        self.committed: dict[int, object] = {}
        self.applied: dict[int, object] = {}
        self.violations: list[str] = []

    def _fail(self, msg: str) -> None:
        self.violations.append(msg)

    # --- observer hooks ----------------------------------------------------------------
    def on_leader(self, node) -> None:
        term = node.term
        prev = self.leaders.setdefault(term, node.id)
        if prev != node.id:
            self._fail(f"election safety: term {term} has leaders {prev} and {node.id}")
        lg = node.log
        for idx, entry in self.committed.items():
            if idx <= lg.snapshot_index:
                continue
            if idx > lg.last_index or lg.entry(idx) != entry:
                self._fail(f"leader completeness: leader {node.id} of term {term} lacks committed index {idx}")

    def on_commit(self, node, old: int, new: int) -> None:
        lg = node.log
        for idx in range(max(old, lg.snapshot_index) + 1, new + 1):
            entry = lg.entry(idx)
            prev = self.committed.setdefault(idx, entry)
            if prev != entry:
                self._fail(f"committed entry {idx} differs on replica {node.id}")

    def on_apply(self, node, entry) -> None:
        prev = self.applied.setdefault(entry.index, entry)
        if prev != entry:
            self._fail(f"state-machine safety: replica {node.id} applied a different entry at {entry.index}")

    def on_snapshot(self, node, index: int, term: int) -> None:
        known = self.committed.get(index)
        if known is not None and known.term != term:
            self._fail(f"replica {node.id} installed a snapshot at {index} with a foreign term")

    # --- whole-cluster checks ---------------------------------------------------------------
    def check_logs(self, nodes) -> None:
        """Log matching across every pair of logs."""
        logs = [(n.id, n.log) for n in nodes]
        for a in range(len(logs)):
            for b in range(a + 1, len(logs)):
                ia, la = logs[a]
                ib, lb = logs[b]
                lo = max(la.first_index, lb.first_index)
                hi = min(la.last_index, lb.last_index)
                # highest index where the terms agree: everything at or below must match
                k = hi
                while k >= lo and la.term_at(k) != lb.term_at(k):
                    k -= 1
                for i in range(lo, k + 1):
                    if la.entry(i) != lb.entry(i):
                        self._fail(f"log matching: replicas {ia} and {ib} agree at {k} but differ at {i}")
                        break

    def check_states(self, nodes) -> None:
        """Replicas that applied the same prefix hold the same logical state."""
        by_applied: dict[int, list] = {}
        for n in nodes:
            by_applied.setdefault(n.last_applied, []).append(n)
        for applied, group in by_applied.items():
            ref = group[0].engine.dump()
            for n in group[1:]:
                if n.engine.dump() != ref:
                    self._fail(f"replicas {group[0].id} and {n.id} differ at last_applied={applied}")

    @property
    def ok(self) -> bool:
        return not self.violations
