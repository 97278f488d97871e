"""Deterministic simulated cluster: replicas on one virtual-clock loop, joined
by an in-memory network that delays, reorders, drops and partitions messages.

Every source of randomness derives from the trace seed, so a failing seed
replays exactly.
"""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

from ..compute import Engine, Result, Status, account_key, command
from ..pagestore import MemFile, Store
from ..runtime import Loop
from .checker import SafetyChecker
from .log import ClientRequest, RaftLog
from .node import NotLeader, RaftConfig, RaftNode, Role, SafetyError, ShutdownError


class SimCluster:
    def __init__(self, n: int = 3, seed: int = 0, config: RaftConfig | None = None,
                 latency: tuple[float, float] = (0.0005, 0.004), drop: float = 0.0,
                 engine_setup=None):
        self.loop = Loop(deterministic_seed=seed)
        self.rng = random.Random(seed * 7919 + 17)
        self.ids = list(range(1, n + 1))
        self.config = config or RaftConfig()
        self.latency = latency
        self.drop = drop
        self.extra_delay: dict[int, float] = {}
        self.engine_setup = engine_setup
        self.checker = SafetyChecker()
        self.files = {i: [MemFile(), MemFile()] for i in self.ids}
        self.nodes: dict[int, RaftNode] = {}
        self.alive: set[int] = set()
        self.groups: dict[int, int] | None = None
        self.endpoints: dict[int, object] = {}
        self.sent = self.dropped = 0
        for i in self.ids:
            self.boot(i)

    # --- replica lifecycle -------------------------------------------------------------------
    def _engine(self, store: Store) -> Engine:
        e = Engine(store)
        if self.engine_setup is not None:
            self.engine_setup(e)
        return e

    def boot(self, i: int) -> RaftNode:
        logf, smf = self.files[i]
        raft_log = RaftLog(Store.open(logf), durable=False)
        engine = self._engine(Store.open(smf))

        def restore(data: bytes, i=i):
            old = self.nodes[i].engine
            old.stores[0].abandon()
            mf = MemFile()
            mf.buf[:] = data
            self.files[i][1] = mf
            return self._engine(Store.open(mf))

        node = RaftNode(i, self.ids, raft_log, engine, self.loop, self.send, self.config,
                        rng=random.Random(self.rng.random()), observer=self.checker, restore=restore)
        self.nodes[i] = node
        self.alive.add(i)
        node.start()
        return node

    def crash(self, i: int) -> None:
        """Fail-stop: volatile state is lost. Everything the replica acknowledged
        was synced, which the simulation models by flushing at the crash."""
        node = self.nodes[i]
        node.stop()
        node.log.store.close(flush=True)
        node.engine.stores[0].close(flush=True)
        self.alive.discard(i)

    def restart(self, i: int) -> RaftNode:
        return self.boot(i)

    # --- network ---------------------------------------------------------------------------
    def partition(self, *groups) -> None:
        self.groups = {m: g for g, members in enumerate(groups) for m in members}

    def heal(self) -> None:
        self.groups = None

    def link_up(self, a: int, b: int) -> bool:
        if self.groups is None or a not in self.groups or b not in self.groups:
            return True
        return self.groups[a] == self.groups[b]

    def send(self, msg) -> None:
        self.sent += 1
        if not self.link_up(msg.src, msg.dst) or (self.drop and self.rng.random() < self.drop):
            self.dropped += 1
            return
        delay = self.rng.uniform(*self.latency) + self.extra_delay.get(msg.src, 0.0) + self.extra_delay.get(msg.dst, 0.0)
        self.loop.call_later(delay, self._deliver, msg)

    def _deliver(self, msg) -> None:
        if not self.link_up(msg.src, msg.dst):
            self.dropped += 1
            return
        if msg.dst in self.endpoints:
            self.endpoints[msg.dst](msg)
        elif msg.dst in self.alive:
            self.nodes[msg.dst].receive(msg)

    # --- inspection ---------------------------------------------------------------------------
    def leader(self) -> RaftNode | None:
        best = None
        for i in self.alive:
            n = self.nodes[i]
            if n.role is Role.LEADER and (best is None or n.term > best.term):
                best = n
        return best

    def run_for(self, duration: float) -> None:
        self.loop.run(until_idle=False, deadline=self.loop.time() + duration)

    def run_until(self, pred, timeout: float = 10.0, step: float = 0.01) -> bool:
        end = self.loop.time() + timeout
        while self.loop.time() < end:
            if pred():
                return True
            self.run_for(step)
        return pred()

    def check(self) -> list[str]:
        live = [self.nodes[i] for i in sorted(self.alive)]
        self.checker.check_logs(live)
        self.checker.check_states(live)
        return self.checker.violations


# --- simulated clients ---------------------------------------------------------------------------
@dataclass
class Op:
    client: int
    kind: str
    args: tuple
    invoke: float
    complete: float | None = None
    result: Result | None = None
    attempts: int = 0


class SimClient:
    """One outstanding request at a time; retries the same request id on
    other replicas until it gets a definite answer."""

    def __init__(self, cluster: SimCluster, client_id: int, timeout: float = 0.4,
                 client_latency: tuple[float, float] = (0.0002, 0.002)):
        self.cluster = cluster
        self.id = client_id
        self.timeout = timeout
        self.latency = client_latency
        self.rng = random.Random(cluster.rng.random())
        self.request_ids = itertools.count(1)
        self.leader_hint: int | None = None
        self.history: list[Op] = []
        self.busy = False
        self.udfs = None

    def _delay(self) -> float:
        return self.rng.uniform(*self.latency)

    def call(self, kind: str, args: tuple, on_done=None) -> Op:
        assert not self.busy, "one request at a time"
        self.busy = True
        loop = self.cluster.loop
        op = Op(self.id, kind, args, loop.time())
        self.history.append(op)
        rid = next(self.request_ids)
        read = kind == "query"
        cmd = command(self.cluster.nodes[self.cluster.ids[0]].engine, kind, *args)
        req = ClientRequest(self.id, rid, cmd, read=read)
        state = {"attempt": 0}

        def finish(res: Result) -> None:
            if op.complete is not None:
                return
            op.complete = loop.time()
            op.result = res
            self.busy = False
            if on_done is not None:
                on_done(op)

        def attempt() -> None:
            if op.complete is not None:
                return
            state["attempt"] += 1
            op.attempts = state["attempt"]
            my = state["attempt"]
            alive = sorted(self.cluster.alive)
            if not alive:
                loop.call_later(0.05, attempt)
                return
            target = self.leader_hint if self.leader_hint in self.cluster.alive else self.rng.choice(alive)
            node = self.cluster.nodes[target]
            try:
                fut = node.submit(req)
            except NotLeader as e:
                self.leader_hint = e.hint if e.hint in self.cluster.alive else None
                loop.call_later(0.01 + self._delay(), attempt)
                return
            except ShutdownError:
                self.leader_hint = None
                loop.call_later(0.01, attempt)
                return

            def done(f, my=my):
                if f.exception() is not None:
                    if my == state["attempt"]:
                        self.leader_hint = getattr(f.exception(), "hint", None)
                        loop.call_later(0.01 + self._delay(), attempt)
                    return
                loop.call_later(self._delay(), finish, f.result())

            fut.add_done_callback(done)

            def expire(my=my):
                if op.complete is None and my == state["attempt"]:
                    self.leader_hint = None
                    attempt()

            loop.call_later(self.timeout, expire)

        loop.call_later(self._delay(), attempt)
        return op


# --- randomized safety traces ---------------------------------------------------------------------
@dataclass
class TraceResult:
    seed: int
    replicas: int
    violations: list[str]
    history: list[Op] = field(default_factory=list)
    committed: int = 0
    leaders: int = 0
    crashes: int = 0
    partitions: int = 0
    converged: bool = True
    leader_kills: int = 0


def run_trace(seed: int, replicas: int = 3, duration: float = 0.5, quiet: float = 0.6,
              clients: int = 2, accounts: int = 3, initial: int = 100, checkpoint_every: int = 0,
              config: RaftConfig | None = None, kill_leader_at: float | None = None) -> TraceResult:
    """One randomized trace: client traffic under partitions, message drops,
    reordering and minority crash-restarts, followed by a healed quiet period.
    ``kill_leader_at`` additionally crashes whoever leads at that offset into
    the chaos phase (it takes a crash slot first, restarting an earlier victim)."""
    # the crash model flushes at the crash, so per-apply flushes add nothing here
    cfg = config or RaftConfig(apply_flush=False, checkpoint_every=checkpoint_every,
                               checkpoint_keep=2 if checkpoint_every else 0)
    cl = SimCluster(replicas, seed, cfg)
    rng = random.Random(seed)
    loop = cl.loop
    violations: list[str] = []
    res = TraceResult(seed, replicas, violations)
    minority = (replicas - 1) // 2
    keys = [account_key(i) for i in range(accounts)]

    # accounts are opened before the chaos starts
    setup = SimClient(cl, 1000)
    pending = list(keys)

    def open_next(op=None):
        if pending:
            setup.call("open", (pending.pop(0), initial, 0), open_next)

    open_next()
    cl.run_until(lambda: not pending and not setup.busy, timeout=5.0)

    cs = [SimClient(cl, 1 + c) for c in range(clients)]
    end = loop.time() + duration

    def issue(c: SimClient, op=None):
        if loop.time() >= end:
            return
        r = rng.random()
        if r < 0.4:
            a, b = rng.sample(keys, 2)
            c.call("transfer", (a, b, rng.randint(1, 60)), lambda op: loop.call_later(rng.uniform(0, 0.02), issue, c))
        elif r < 0.6:
            c.call("deposit", (rng.choice(keys), rng.randint(1, 20)), lambda op: loop.call_later(rng.uniform(0, 0.02), issue, c))
        else:
            c.call("query", (rng.choice(keys),), lambda op: loop.call_later(rng.uniform(0, 0.02), issue, c))

    for c in cs:
        loop.call_later(rng.uniform(0, 0.02), issue, c)

    crashed: set[int] = set()

    def fault():
        if loop.time() >= end:
            return
        r = rng.random()
        if r < 0.3:
            members = list(cl.ids)
            rng.shuffle(members)
            k = rng.randint(1, len(members) - 1)
            cl.partition(members[:k], members[k:])
            res.partitions += 1
        elif r < 0.5:
            cl.heal()
        elif r < 0.75 and len(crashed) < minority:
            victim = cl.leader().id if cl.leader() and rng.random() < 0.5 else rng.choice(sorted(cl.alive))
            cl.crash(victim)
            crashed.add(victim)
            res.crashes += 1

            def back(v=victim):
                if v in crashed:
                    crashed.discard(v)
                    cl.restart(v)
            loop.call_later(rng.uniform(0.1, 0.6), back)
        else:
            cl.drop = rng.choice((0.0, 0.02, 0.1, 0.25))
        loop.call_later(rng.uniform(0.05, 0.3), fault)

    loop.call_later(rng.uniform(0.05, 0.2), fault)

    def kill_leader():
        if loop.time() >= end:
            return
        lead = cl.leader()
        if lead is None:
            loop.call_later(0.01, kill_leader)
            return
        while len(crashed) >= minority:
            cl.restart(crashed.pop())
        cl.crash(lead.id)
        crashed.add(lead.id)
        res.crashes += 1
        res.leader_kills += 1

        def back(v=lead.id):
            if v in crashed:
                crashed.discard(v)
                cl.restart(v)
        loop.call_later(rng.uniform(0.1, 0.4), back)

    if kill_leader_at is not None:
        loop.call_later(kill_leader_at, kill_leader)
    try:
        cl.run_for(duration)
        cl.heal()
        cl.drop = 0.0
        for v in sorted(crashed):
            crashed.discard(v)
            cl.restart(v)
        cl.run_until(lambda: len({cl.nodes[i].last_applied for i in cl.ids}) == 1
                     and cl.leader() is not None, timeout=quiet)
    except SafetyError as e:
        violations.append(f"node assertion: {e}")
    violations.extend(cl.check())
    res.converged = len({cl.nodes[i].last_applied for i in cl.ids}) == 1
    res.committed = max(n.commit_index for n in cl.nodes.values())
    res.leaders = len(cl.checker.leaders)
    res.history = [op for c in cs for op in c.history]
    return res
