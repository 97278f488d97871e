"""Raft node with proposal batching and log-serialized strong reads.

The node is transport-agnostic: it is driven by :meth:`RaftNode.receive` and
by timers on a :class:`~maxwellite.runtime.Loop`, and emits messages through a
``send`` callable. The same code runs over TCP and on the deterministic
simulated network.
"""
from __future__ import annotations

import enum
import logging
import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable

from ..runtime import Future, Loop
from .log import NO_VOTE, ClientRequest, RaftLog, RLogEntry
from .messages import (AppendEntries, AppendReply, InstallSnapshot, Probe, ProbeReply, RequestVote,
                       VoteReply)

log = logging.getLogger(__name__)


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class NotLeader(Exception):
    def __init__(self, hint: int | None):
        super().__init__(f"not the leader (hint: {hint})")
        self.hint = hint


class ShutdownError(Exception):
    pass


class SafetyError(AssertionError):
    """A node observed a state that Raft's invariants rule out."""


@dataclass
class RaftConfig:
    election_timeout: tuple[float, float] = (0.150, 0.300)
    heartbeat: float = 0.050
    max_entries: int = 64
    max_bytes: int = 256 * 1024
    max_delay: float = 0.001
    # entries per AppendEntries message
    max_append: int = 64
    # flush the state machine after each apply round (before replying)
    apply_flush: bool = True
    # compact the log once this many applied entries sit above the checkpoint; 0 = never
    checkpoint_every: int = 0
    checkpoint_keep: int = 0


class BatchBuffer:
    """Pending client requests of the leader, drained into one log entry."""

    def __init__(self, max_entries: int = 64, max_bytes: int = 256 * 1024, max_delay: float = 0.001):
        self.max_entries = max_entries
        self.max_bytes = max_bytes
        self.max_delay = max_delay
        self.items: list[tuple[ClientRequest, Future, float]] = []
        self.bytes = 0
        self.timer = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def opened(self) -> float | None:
        return self.items[0][2] if self.items else None

    def add(self, req: ClientRequest, fut: Future, now: float) -> None:
        self.items.append((req, fut, now))
        self.bytes += req.size

    def full(self) -> bool:
        return len(self.items) >= self.max_entries or self.bytes >= self.max_bytes

    def take(self) -> list[tuple[ClientRequest, Future, float]]:
        n, size = 0, 0
        for req, _, _ in self.items:
            if n and (n >= self.max_entries or size + req.size > self.max_bytes):
                break
            n += 1
            size += req.size
        out, self.items = self.items[:n], self.items[n:]
        self.bytes -= size
        return out

    def fail_all(self, exc: BaseException) -> None:
        items, self.items, self.bytes = self.items, [], 0
        for _, fut, _ in items:
            fut.try_set_exception(exc)


class RaftNode:
    def __init__(self, node_id: int, members, raft_log: RaftLog, engine, loop: Loop,
                 send: Callable[[object], None], config: RaftConfig | None = None,
                 rng: random.Random | None = None, observer=None,
                 restore: Callable[[bytes], object] | None = None,
                 clock_us: Callable[[], int] | None = None):
        self.id = node_id
        self.members = sorted(members)
        self.peers = [m for m in self.members if m != node_id]
        self.quorum = len(self.members) // 2 + 1
        self.log = raft_log
        self.engine = engine
        self.loop = loop
        self._send = send
        self.config = config or RaftConfig()
        self.rng = rng or random.Random(node_id)
        self.observer = observer
        self.restore = restore
        self.clock_us = clock_us or (lambda: int(loop.time() * 1e6))
        applied = engine.last_applied
        if applied < raft_log.snapshot_index:
            raise SafetyError(f"state machine at {applied} is behind the log checkpoint {raft_log.snapshot_index}")
        self.role = Role.FOLLOWER
        self.leader_id: int | None = None
        self.commit_index = applied
        self.last_applied = applied
        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.votes: set[int] = set()
        c = self.config
        self.batch = BatchBuffer(c.max_entries, c.max_bytes, c.max_delay)
        self.pending: dict[int, list[Future]] = {}
        self.batch_sizes: deque[int] = deque(maxlen=4096)  # recent batch sizes
        self.running = False
        self._election_deadline = math.inf
        self._election_timer = None
        self._heartbeat_timer = None

    # --- lifecycle -------------------------------------------------------------------------
    @property
    def term(self) -> int:
        return self.log.term

    def start(self) -> None:
        self.running = True
        self._reset_election_deadline()

    def stop(self) -> None:
        self.running = False
        for h in (self._election_timer, self._heartbeat_timer, self.batch.timer):
            if h is not None:
                h.cancel()
        self._election_timer = self._heartbeat_timer = self.batch.timer = None
        exc = ShutdownError(f"replica {self.id} stopped")
        self._fail_pending(exc)

    def _fail_pending(self, exc: BaseException) -> None:
        self.batch.fail_all(exc)
        if self.batch.timer is not None:
            self.batch.timer.cancel()
            self.batch.timer = None
        pending, self.pending = self.pending, {}
        for futs in pending.values():
            for f in futs:
                f.try_set_exception(exc)

    def status(self) -> dict:
        recent = self.batch_sizes
        return {"id": self.id, "role": self.role.value, "term": self.term, "leader": self.leader_id,
                "avg_batch": round(sum(recent) / len(recent), 2) if recent else 0.0,
                "commit_index": self.commit_index, "last_applied": self.last_applied,
                "last_index": self.log.last_index, "snapshot_index": self.log.snapshot_index}

    # --- timers ------------------------------------------------------------------------
    def _reset_election_deadline(self) -> None:
        lo, hi = self.config.election_timeout
        self._election_deadline = self.loop.time() + self.rng.uniform(lo, hi)
        if self._election_timer is None:
            self._election_timer = self.loop.call_at(self._election_deadline, self._on_election_timer)

    def _on_election_timer(self) -> None:
        self._election_timer = None
        if not self.running:
            return
        if self.role is Role.LEADER:
            return
        if self.loop.time() < self._election_deadline:
            self._election_timer = self.loop.call_at(self._election_deadline, self._on_election_timer)
            return
        self._start_election()

    def _start_election(self) -> None:
        term = self.term + 1
        self.log.set_hard_state(term, self.id)
        self.log.sync()
        self.role = Role.CANDIDATE
        self.leader_id = None
        self.votes = {self.id}
        self._reset_election_deadline()
        if len(self.votes) >= self.quorum:
            self._become_leader()
            return
        for p in self.peers:
            self.send(RequestVote(self.id, p, term, self.log.last_index, self.log.last_term))

    def _on_heartbeat(self) -> None:
        self._heartbeat_timer = None
        if not self.running or self.role is not Role.LEADER:
            return
        for p in self.peers:
            # resend anything not yet acknowledged (covers dropped messages)
            self.next_index[p] = self.match_index[p] + 1
            self._send_append(p)
        self._heartbeat_timer = self.loop.call_later(self.config.heartbeat, self._on_heartbeat)

    def send(self, msg) -> None:
        self._send(msg)

    # --- role changes ------------------------------------------------------------------------
    def _step_down(self, term: int, leader: int | None = None) -> None:
        if term > self.term:
            self.log.set_hard_state(term, NO_VOTE)
            self.log.sync()
        was_leader = self.role is Role.LEADER
        self.role = Role.FOLLOWER
        self.leader_id = leader
        if was_leader:
            if self._heartbeat_timer is not None:
                self._heartbeat_timer.cancel()
                self._heartbeat_timer = None
            self._fail_pending(NotLeader(leader))
            self._reset_election_deadline()

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.leader_id = self.id
        for p in self.peers:
            self.next_index[p] = self.log.last_index + 1
            self.match_index[p] = 0
        if self.observer is not None:
            self.observer.on_leader(self)
        # an entry of the new term lets earlier-term entries commit
        self._append_local(RLogEntry(self.term, self.log.last_index + 1, ()), None)
        self._heartbeat_timer = self.loop.call_later(self.config.heartbeat, self._on_heartbeat)

    # --- client entry points -------------------------------------------------------------
    def submit(self, req: ClientRequest) -> Future:
        """Queue a write (or, with ``req.read``, a log-serialized read); the
        future resolves to the state machine's result once applied here."""
        if not self.running:
            raise ShutdownError(f"replica {self.id} is stopped")
        if self.role is not Role.LEADER:
            raise NotLeader(self.leader_id)
        if not req.ts_us:
            req = ClientRequest(req.client_id, req.request_id, req.command, self.clock_us(), req.read)
        fut = Future()
        self.batch.add(req, fut, self.loop.time())
        self._maybe_flush()
        return fut

    def propose(self, command: bytes, client_id: int = 0, request_id: int = 0) -> Future:
        return self.submit(ClientRequest(client_id, request_id, command))

    def strong_read(self, command: bytes, client_id: int = 0, request_id: int = 0) -> Future:
        return self.submit(ClientRequest(client_id, request_id, command, read=True))

    def weak_read(self, command: bytes):
        """Serve a read from this replica's applied state, bypassing the log."""
        if not self.running:
            raise ShutdownError(f"replica {self.id} is stopped")
        return self.engine.read(command)

    # --- batching --------------------------------------------------------------------------
    def pipeline_idle(self) -> bool:
        return self.log.last_index <= self.commit_index

    def _maybe_flush(self) -> None:
        b = self.batch
        while b and self.role is Role.LEADER and (self.pipeline_idle() or b.full()):
            self.flush_batch()
        if b and b.timer is None and self.role is Role.LEADER:
            b.timer = self.loop.call_at(b.opened + b.max_delay, self._on_batch_timer)

    def _on_batch_timer(self) -> None:
        self.batch.timer = None
        if self.running and self.role is Role.LEADER and self.batch:
            self.flush_batch()
            self._maybe_flush()

    def flush_batch(self) -> RLogEntry | None:
        """Drain (up to the limits of) the buffer into one log entry and start
        replicating it."""
        items = self.batch.take()
        if not items:
            return None
        if not self.batch and self.batch.timer is not None:
            self.batch.timer.cancel()
            self.batch.timer = None
        entry = RLogEntry(self.term, self.log.last_index + 1, tuple(r for r, _, _ in items))
        self.batch_sizes.append(len(items))
        self._append_local(entry, [f for _, f, _ in items])
        return entry

    def _append_local(self, entry: RLogEntry, futs) -> None:
        self.log.append([entry])
        self.log.sync()
        if futs:
            self.pending[entry.index] = futs
        for p in self.peers:
            self._send_append(p)
        self._advance_commit()

    # --- replication -------------------------------------------------------------------------
    def _send_append(self, p: int) -> None:
        ni = self.next_index[p]
        if ni <= self.log.snapshot_index:
            self._send_snapshot(p)
            return
        prev = ni - 1
        ents = self.log.entries(ni, min(self.log.last_index, ni + self.config.max_append - 1))
        self.send(AppendEntries(self.id, p, self.term, prev, self.log.term_at(prev), tuple(ents),
                                self.commit_index))
        if ents:
            self.next_index[p] = ents[-1].index + 1

    def _send_snapshot(self, p: int) -> None:
        idx = self.last_applied
        self.engine.flush()
        self.send(InstallSnapshot(self.id, p, self.term, idx, self.log.term_at(idx), self.engine.snapshot()))
        self.next_index[p] = idx + 1

    def _advance_commit(self) -> None:
        if self.role is not Role.LEADER:
            return
        matches = sorted([self.log.last_index] + [self.match_index[p] for p in self.peers], reverse=True)
        n = matches[self.quorum - 1]
        if n > self.commit_index and self.log.term_at(n) == self.term:
            self._set_commit(n)
            self._maybe_flush()

    def _set_commit(self, n: int) -> None:
        old, self.commit_index = self.commit_index, n
        if self.observer is not None:
            self.observer.on_commit(self, old, n)
        self._apply_committed()

    def _apply_committed(self) -> None:
        if self.last_applied >= self.commit_index:
            return
        done = []
        while self.last_applied < self.commit_index:
            i = self.last_applied + 1
            e = self.log.entry(i)
            futs = self.pending.pop(i, None)
            results = self.engine.apply(i, e.term, e.batch, serve_reads=futs is not None)
            self.last_applied = i
            if self.observer is not None:
                self.observer.on_apply(self, e)
            if futs:
                done.append((futs, results))
        if self.config.apply_flush:
            self.engine.flush()
        c = self.config
        if c.checkpoint_every and self.last_applied - self.log.snapshot_index >= c.checkpoint_every + c.checkpoint_keep:
            self.checkpoint(self.last_applied - c.checkpoint_keep)
        # replies go out only after the applied state is durable
        for futs, results in done:
            for f, r in zip(futs, results):
                f.try_set_result(r)

    def checkpoint(self, upto: int | None = None) -> int:
        """Drop applied log entries up to ``upto`` (default: everything applied)."""
        upto = self.last_applied if upto is None else min(upto, self.last_applied)
        self.engine.flush()
        n = self.log.compact(upto)
        self.log.sync()
        return n

    # --- message handling ------------------------------------------------------------------
    def receive(self, msg) -> None:
        if not self.running:
            return
        if isinstance(msg, Probe):
            self.send(ProbeReply(self.id, msg.src, msg.seq, msg.sent_us, self.last_applied,
                                 self.role is Role.LEADER))
            return
        if isinstance(msg, ProbeReply):
            return
        if msg.term > self.term:
            leader = msg.src if isinstance(msg, (AppendEntries, InstallSnapshot)) else None
            self._step_down(msg.term, leader)
        if isinstance(msg, AppendEntries):
            self._on_append(msg)
        elif isinstance(msg, AppendReply):
            self._on_append_reply(msg)
        elif isinstance(msg, RequestVote):
            self._on_request_vote(msg)
        elif isinstance(msg, VoteReply):
            self._on_vote_reply(msg)
        elif isinstance(msg, InstallSnapshot):
            self._on_snapshot(msg)
        else:
            log.warning("replica %s: unexpected message %r", self.id, type(msg).__name__)

    def _follow(self, leader: int) -> None:
        if self.role is Role.LEADER:
            raise SafetyError(f"two leaders in term {self.term}: {self.id} and {leader}")
        self.role = Role.FOLLOWER
        self.leader_id = leader
        self._reset_election_deadline()

    def _on_append(self, m: AppendEntries) -> None:
        lg = self.log
        if m.term < lg.term:
            self.send(AppendReply(self.id, m.src, lg.term, False, 0, 0))
            return
        self._follow(m.src)
        prev, entries = m.prev_index, m.entries
        if prev > lg.last_index:
            self.send(AppendReply(self.id, m.src, lg.term, False, 0, lg.last_index + 1))
            return
        if prev < lg.snapshot_index:
            # everything up to the checkpoint is committed, hence identical
            entries = tuple(e for e in entries if e.index > lg.snapshot_index)
            prev = lg.snapshot_index
        elif lg.term_at(prev) != m.prev_term:
            t = lg.term_at(prev)
            floor = max(self.commit_index, lg.snapshot_index)
            ci = prev
            while ci - 1 > floor and lg.term_at(ci - 1) == t:
                ci -= 1
            self.send(AppendReply(self.id, m.src, lg.term, False, 0, max(ci, floor + 1)))
            return
        new = None
        for k, e in enumerate(entries):
            if e.index > lg.last_index:
                new = entries[k:]
                break
            if lg.term_at(e.index) != e.term:
                if e.index <= self.commit_index:
                    raise SafetyError(f"replica {self.id}: leader overwrites committed index {e.index}")
                lg.truncate_from(e.index)
                new = entries[k:]
                break
        if new:
            lg.append(list(new))
        if new is not None:
            lg.sync()
        match = max(m.prev_index + len(m.entries), prev)
        if m.leader_commit > self.commit_index:
            n = min(m.leader_commit, match)
            if n > self.commit_index:
                self._set_commit(n)
        self.send(AppendReply(self.id, m.src, lg.term, True, match))

    def _on_append_reply(self, m: AppendReply) -> None:
        if self.role is not Role.LEADER or m.term != self.term:
            return
        p = m.src
        if m.success:
            if m.match_index > self.match_index[p]:
                self.match_index[p] = m.match_index
            self.next_index[p] = max(self.next_index[p], self.match_index[p] + 1)
            self._advance_commit()
            if self.role is Role.LEADER and self.next_index[p] <= self.log.last_index:
                self._send_append(p)
        else:
            self.next_index[p] = max(self.match_index[p] + 1, min(self.next_index[p], m.conflict_index))
            self._send_append(p)

    def _on_request_vote(self, m: RequestVote) -> None:
        lg = self.log
        granted = False
        if m.term == lg.term and lg.voted_for in (NO_VOTE, m.src) and self.role is not Role.LEADER:
            if (m.last_term, m.last_index) >= (lg.last_term, lg.last_index):
                granted = True
                lg.set_hard_state(m.term, m.src)
                lg.sync()
                self._reset_election_deadline()
        self.send(VoteReply(self.id, m.src, lg.term, granted))

    def _on_vote_reply(self, m: VoteReply) -> None:
        if self.role is not Role.CANDIDATE or m.term != self.term or not m.granted:
            return
        self.votes.add(m.src)
        if len(self.votes) >= self.quorum:
            self._become_leader()

    def _on_snapshot(self, m: InstallSnapshot) -> None:
        lg = self.log
        if m.term < lg.term:
            self.send(AppendReply(self.id, m.src, lg.term, False, 0, 0))
            return
        self._follow(m.src)
        if m.last_index > self.commit_index:
            if self.restore is None:
                raise ShutdownError("snapshot received but no restore hook configured")
            self.engine = self.restore(m.data)
            if self.engine.last_applied != m.last_index:
                raise SafetyError("snapshot image disagrees with its index")
            lg.reset_to_snapshot(m.last_index, m.last_term)
            lg.sync()
            self.commit_index = self.last_applied = m.last_index
            if self.observer is not None:
                self.observer.on_snapshot(self, m.last_index, m.last_term)
        self.send(AppendReply(self.id, m.src, lg.term, True, m.last_index))


# --- weak-read routing -----------------------------------------------------------------------
class NoEligibleReplica(Exception):
    pass


class ProbeTable:
    """Client-side smoothed RTT per replica (EWMA, milliseconds)."""

    def __init__(self, replicas, alpha: float = 0.3, interval: float = 0.1, max_failures: int = 3):
        self.alpha = alpha
        self.interval = interval
        self.max_failures = max_failures
        self.rtt_ms: dict = {r: None for r in replicas}
        self.last_probe: dict = {r: -math.inf for r in replicas}
        self.failures: dict = {r: 0 for r in replicas}

    def record(self, replica, rtt_ms: float, now: float) -> float:
        old = self.rtt_ms.get(replica)
        new = rtt_ms if old is None else self.alpha * rtt_ms + (1 - self.alpha) * old
        self.rtt_ms[replica] = new
        self.last_probe[replica] = now
        self.failures[replica] = 0
        return new

    def record_timeout(self, replica) -> None:
        self.failures[replica] = self.failures.get(replica, 0) + 1

    def eligible(self, now: float) -> list:
        return [r for r, rtt in self.rtt_ms.items()
                if rtt is not None and self.failures[r] < self.max_failures
                and now - self.last_probe[r] < 3 * self.interval]

    def choose(self, now: float):
        cands = self.eligible(now)
        if not cands:
            raise NoEligibleReplica("no replica has a fresh probe")
        return min(cands, key=lambda r: (self.rtt_ms[r], r))


def probe_tick(table: ProbeTable, ping: Callable[[object], float | None], now: float) -> ProbeTable:
    """One ping per replica; ``ping`` returns the RTT in ms or None on timeout."""
    for r in list(table.rtt_ms):
        rtt = ping(r)
        if rtt is None:
            table.record_timeout(r)
        else:
            table.record(r, rtt, now)
    return table
