import random

import pytest
from hypothesis import given, settings, strategies as st

from maxwellite.compute import Engine, Status, account_key, command, decode_result
from maxwellite.consensus import (AppendEntries, AppendReply, BatchBuffer, ClientRequest, NoEligibleReplica,
                                  NotLeader, ProbeTable, RaftConfig, RaftLog, RaftNode, RequestVote,
                                  RLogEntry, Role, VoteReply, decode_batch, encode_batch, probe_tick)
from maxwellite.consensus.sim import SimClient, SimCluster, run_trace
from maxwellite.pagestore import MemFile, Store
from maxwellite.runtime import Future, Loop

requests_st = st.lists(st.builds(ClientRequest, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
                                 st.binary(max_size=64), st.integers(0, 2**64 - 1), st.booleans()),
                       max_size=10)


@given(requests_st)
def test_batch_codec_roundtrip(batch):
    assert decode_batch(encode_batch(batch)) == tuple(batch)


def test_batch_codec_rejects_garbage():
    data = encode_batch([ClientRequest(1, 2, b"abc")])
    for bad in (data[:-1], data + b"\x00", b"\x01\x00"):
        with pytest.raises(Exception):
            decode_batch(bad)


# --- log store ---------------------------------------------------------------------------------
def test_log_persists_and_reopens():
    mf = MemFile()
    lg = RaftLog(Store.open(mf))
    lg.set_hard_state(3, 2)
    entries = [RLogEntry(1 + i // 4, i + 1, (ClientRequest(1, i, b"c%d" % i),)) for i in range(10)]
    lg.append(entries)
    lg.truncate_from(8)
    lg.sync()
    lg.store.close()
    again = RaftLog(Store.open(mf))
    assert (again.term, again.voted_for) == (3, 2)
    assert again.last_index == 7 and again.entries(1, 7) == entries[:7]
    assert again.term_at(7) == 2 and again.term_at(8) is None
    again.compact(4)
    assert again.first_index == 5 and again.term_at(4) == 1 and again.term_at(3) is None
    assert again.store.table("rlog").row_count == 3
    again.store.close()
    third = RaftLog(Store.open(mf))
    assert third.snapshot_index == 4 and third.entries(1, 10) == entries[4:7]


def test_log_rejects_gaps():
    lg = RaftLog(Store.open(None))
    with pytest.raises(ValueError):
        lg.append([RLogEntry(1, 2, ())])


# --- single-node protocol units --------------------------------------------------------------
def solo(node_id=1, members=(1, 2, 3), config=None):
    loop = Loop(deterministic_seed=node_id)
    out = []
    node = RaftNode(node_id, members, RaftLog(Store.open(None)), Engine(Store.open(None)), loop, out.append,
                    config or RaftConfig())
    node.start()
    return node, out, loop


def entry(term, index, payload=b""):
    return RLogEntry(term, index, (ClientRequest(9, index, payload),) if payload else ())


def test_heartbeat_advances_commit():
    node, out, _ = solo()
    node.receive(AppendEntries(2, 1, 1, 0, 0, (entry(1, 1), entry(1, 2)), 0))
    assert out[-1] == AppendReply(1, 2, 1, True, 2)
    node.receive(AppendEntries(2, 1, 1, 2, 1, (), 2))
    assert out[-1].success and node.commit_index == 2 and node.last_applied == 2
    assert node.leader_id == 2 and node.role is Role.FOLLOWER


def test_conflicting_suffix_is_truncated():
    node, out, _ = solo()
    node.receive(AppendEntries(2, 1, 1, 0, 0, (entry(1, 1), entry(1, 2, b"old"), entry(1, 3, b"old")), 1))
    assert node.log.last_index == 3 and node.commit_index == 1
    # new leader in term 2 never saw 2..3 and replaces them
    node.receive(AppendEntries(3, 1, 2, 3, 2, (), 1))
    rep = out[-1]
    assert not rep.success and rep.conflict_index == 2
    node.receive(AppendEntries(3, 1, 2, 1, 1, (entry(2, 2, b"new"),), 2))
    assert out[-1] == AppendReply(1, 3, 2, True, 2)
    assert node.log.last_index == 2 and node.log.entry(2) == entry(2, 2, b"new")
    assert node.log.store.table("rlog").row_count == 2


def test_stale_term_rejected_and_candidate_steps_down():
    node, out, loop = solo()
    loop.run(until_idle=False, deadline=1.0)
    assert node.role is Role.CANDIDATE
    term = node.term
    node.receive(AppendEntries(2, 1, term - 1, 0, 0, (), 0))
    assert out[-1] == AppendReply(1, 2, term, False, 0, 0)
    node.receive(AppendEntries(3, 1, term + 1, 0, 0, (), 0))
    assert node.role is Role.FOLLOWER and node.term == term + 1 and node.leader_id == 3


def test_vote_rules():
    node, out, _ = solo()
    node.receive(AppendEntries(2, 1, 1, 0, 0, (entry(1, 1), entry(1, 2)), 0))
    # candidate with a shorter log is refused, an up-to-date one gets the vote, once per term
    node.receive(RequestVote(3, 1, 2, 1, 1))
    assert out[-1] == VoteReply(1, 3, 2, False)
    node.receive(RequestVote(3, 1, 3, 2, 1))
    assert out[-1] == VoteReply(1, 3, 3, True)
    node.receive(RequestVote(2, 1, 3, 5, 3))
    assert out[-1] == VoteReply(1, 2, 3, False)
    assert node.log.voted_for == 3


def test_vote_is_durable_before_reply():
    mf = MemFile()
    loop = Loop(deterministic_seed=0)
    out = []
    node = RaftNode(1, (1, 2, 3), RaftLog(Store.open(mf)), Engine(Store.open(None)), loop, out.append)
    node.start()
    node.receive(RequestVote(2, 1, 4, 0, 0))
    assert out[-1].granted
    node.log.store.abandon()  # crash without a clean close
    again = RaftLog(Store.open(mf))
    assert (again.term, again.voted_for) == (4, 2)


# --- batching ------------------------------------------------------------------------------------
def test_batch_buffer_limits():
    b = BatchBuffer(max_entries=3, max_bytes=10_000)
    for i in range(7):
        b.add(ClientRequest(1, i, b"x"), Future(), 0.0)
    assert b.full()
    sizes = []
    while b:
        sizes.append(len(b.take()))
    assert sizes == [3, 3, 1]
    b = BatchBuffer(max_entries=100, max_bytes=200)
    for i in range(5):
        b.add(ClientRequest(1, i, b"y" * 60), Future(), 0.0)
    assert [len(b.take()) for _ in range(3)] == [2, 2, 1]


def elect(cl: SimCluster):
    assert cl.run_until(lambda: cl.leader() is not None, timeout=5.0)
    return cl.leader()


def test_idle_pipeline_flushes_single_request_immediately():
    cl = SimCluster(3, seed=1)
    leader = elect(cl)
    cl.run_until(lambda: leader.pipeline_idle(), timeout=1.0)
    before = leader.log.last_index
    leader.propose(command(leader.engine, "echo", b"x"))
    assert leader.log.last_index == before + 1 and leader.batch_sizes[-1] == 1


def test_busy_pipeline_accumulates_up_to_limit():
    cl = SimCluster(3, seed=2, config=RaftConfig(max_entries=64))
    leader = elect(cl)
    cl.run_until(lambda: leader.pipeline_idle(), timeout=1.0)
    leader.batch_sizes.clear()
    futs = [leader.propose(command(leader.engine, "echo", b"%d" % i)) for i in range(201)]
    # the first request flushed alone; the other 200 arrived while it was in flight
    assert leader.batch_sizes[0] == 1
    cl.run_until(lambda: all(f.done() for f in futs), timeout=2.0)
    assert all(f.result().ok for f in futs)
    assert sum(leader.batch_sizes) == 201 and max(list(leader.batch_sizes)[1:]) == 64
    assert all(s <= 64 for s in leader.batch_sizes)


def test_busy_pipeline_timer_flush_within_max_delay():
    cl = SimCluster(3, seed=3, config=RaftConfig(max_delay=0.001), latency=(0.005, 0.006))
    leader = elect(cl)
    cl.run_until(lambda: leader.pipeline_idle(), timeout=1.0)
    leader.propose(command(leader.engine, "echo", b"a"))  # in flight for >= 10 ms
    n = leader.log.last_index
    t0 = cl.loop.time()
    leader.propose(command(leader.engine, "echo", b"b"))
    assert leader.log.last_index == n
    cl.run_until(lambda: leader.log.last_index == n + 1, timeout=0.1, step=0.0001)
    assert cl.loop.time() - t0 <= 0.001 + 1e-4
    assert not leader.pipeline_idle()


# --- cluster behaviour ------------------------------------------------------------------------------
def test_single_propose_applied_everywhere():
    cl = SimCluster(3, seed=4)
    leader = elect(cl)
    fut = leader.propose(command(leader.engine, "open", account_key(0), 100, 0), client_id=1, request_id=1)
    cl.run_until(fut.done, timeout=1.0)
    assert fut.result().ok
    cl.run_until(lambda: len({n.last_applied for n in cl.nodes.values()}) == 1, timeout=1.0)
    dumps = [n.engine.dump() for n in cl.nodes.values()]
    assert dumps[0] == dumps[1] == dumps[2]


def test_thousand_concurrent_proposes_one_global_order():
    cl = SimCluster(3, seed=5)
    applied = {i: [] for i in cl.ids}

    class Rec:
        def on_leader(self, node): cl.checker.on_leader(node)
        def on_commit(self, node, a, b): cl.checker.on_commit(node, a, b)
        def on_snapshot(self, *a): pass
        def on_apply(self, node, e):
            applied[node.id].extend((r.client_id, r.request_id) for r in e.batch)

    for n in cl.nodes.values():
        n.observer = Rec()
    leader = elect(cl)
    futs = [leader.propose(command(leader.engine, "echo", b"%d" % i), client_id=1 + i % 7, request_id=1 + i)
            for i in range(1000)]
    cl.run_until(lambda: all(f.done() for f in futs), timeout=5.0)
    assert all(f.result().ok for f in futs)
    cl.run_until(lambda: len({n.last_applied for n in cl.nodes.values()}) == 1, timeout=1.0)
    seqs = list(applied.values())
    assert len(seqs[0]) == 1000 and seqs[0] == seqs[1] == seqs[2]
    assert not cl.check()


def test_propose_to_follower_gives_hint():
    cl = SimCluster(3, seed=6)
    leader = elect(cl)
    cl.run_for(0.2)
    follower = next(n for n in cl.nodes.values() if n is not leader)
    with pytest.raises(NotLeader) as ei:
        follower.propose(b"x")
    assert ei.value.hint == leader.id


def test_strong_and_weak_reads():
    cl = SimCluster(3, seed=7)
    leader = elect(cl)
    q = command(leader.engine, "query", account_key(0))
    f = leader.propose(command(leader.engine, "open", account_key(0), 0, 0), 1, 1)
    cl.run_until(f.done, timeout=1.0)
    f = leader.propose(command(leader.engine, "deposit", account_key(0), 50), 1, 2)
    cl.run_until(f.done, timeout=1.0)
    r = leader.strong_read(q)
    cl.run_until(r.done, timeout=1.0)
    assert decode_result(leader.engine, "query", r.result())[0] == 50
    cl.run_until(lambda: len({n.last_applied for n in cl.nodes.values()}) == 1, timeout=1.0)
    for n in cl.nodes.values():
        assert n.weak_read(q) == r.result()


def test_lagging_follower_serves_committed_prefix():
    cl = SimCluster(3, seed=8)
    leader = elect(cl)
    q = command(leader.engine, "query", account_key(0))
    f = leader.propose(command(leader.engine, "open", account_key(0), 0, 0), 1, 1)
    cl.run_until(f.done, timeout=1.0)
    cl.run_for(0.2)
    lagger = next(n for n in cl.nodes.values() if n is not leader)
    others = [i for i in cl.ids if i != lagger.id]
    cl.partition(others, [lagger.id])
    history = [0]
    for k in range(1, 6):
        f = leader.propose(command(leader.engine, "deposit", account_key(0), 10), 1, 1 + k)
        cl.run_until(f.done, timeout=1.0)
        history.append(10 * k)
    stale = decode_result(lagger.engine, "query", lagger.weak_read(q))[0]
    assert stale in history and stale < history[-1]
    cl.heal()
    cl.run_until(lambda: lagger.last_applied == leader.last_applied, timeout=2.0)
    assert decode_result(lagger.engine, "query", lagger.weak_read(q))[0] == 50


def test_leader_crash_recovers_within_election_timeout():
    cl = SimCluster(3, seed=9)
    leader = elect(cl)
    cl.run_for(0.3)
    t0 = cl.loop.time()
    cl.crash(leader.id)
    assert cl.run_until(lambda: cl.leader() is not None, timeout=1.0, step=0.005)
    # one election timeout to notice, plus at most one more for a split vote
    assert cl.loop.time() - t0 <= 2 * cl.config.election_timeout[1] + 0.05


def test_acknowledged_entries_survive_restart():
    cl = SimCluster(3, seed=10)
    leader = elect(cl)
    futs = [leader.propose(command(leader.engine, "echo", b"%d" % i), 1, i + 1) for i in range(20)]
    cl.run_until(lambda: all(f.done() for f in futs), timeout=2.0)
    n = leader.log.last_index
    for i in cl.ids:
        cl.crash(i)
    for i in cl.ids:
        cl.restart(i)
    assert cl.nodes[leader.id].log.last_index == n
    new = elect(cl)
    f = new.propose(command(new.engine, "echo", b"after"), 1, 99)
    cl.run_until(f.done, timeout=2.0)
    cl.run_until(lambda: len({x.last_applied for x in cl.nodes.values()}) == 1, timeout=2.0)
    assert all(x.last_applied >= n + 1 for x in cl.nodes.values())
    assert not cl.check()


def test_durable_log_survives_unclean_crash(tmp_path):
    # real files and real fsyncs: acknowledged appends survive a crash with no close
    path = str(tmp_path / "log.db")
    lg = RaftLog(Store.open(path), durable=True)
    lg.set_hard_state(2, 1)
    lg.append([entry(2, 1, b"a"), entry(2, 2, b"b")])
    lg.sync()
    lg.store.abandon()
    again = RaftLog(Store.open(path))
    assert again.last_index == 2 and again.entry(2) == entry(2, 2, b"b") and again.term == 2


def test_checkpoint_and_snapshot_install():
    cl = SimCluster(3, seed=11, config=RaftConfig(checkpoint_every=10))
    leader = elect(cl)
    cl.run_for(0.2)
    lagger = next(n for n in cl.nodes.values() if n is not leader)
    cl.crash(lagger.id)
    for k in range(40):
        f = leader.propose(command(leader.engine, "echo", b"more"), 2, k + 1)
        cl.run_until(f.done, timeout=1.0)
    assert leader.log.snapshot_index > 0
    assert leader.log.store.table("rlog").row_count == leader.log.last_index - leader.log.snapshot_index
    cl.restart(lagger.id)
    cl.run_until(lambda: cl.nodes[lagger.id].last_applied == leader.last_applied, timeout=3.0)
    assert cl.nodes[lagger.id].engine.dump() == leader.engine.dump()
    assert not cl.check()


# --- weak-read routing --------------------------------------------------------------------------
def test_probe_table_examples():
    t = ProbeTable(["r1", "r2", "r3"], interval=1.0)
    assert t.record("r1", 4.0, 0.0) == 4.0
    assert t.record("r1", 8.0, 0.0) == pytest.approx(0.3 * 8 + 0.7 * 4)
    t = ProbeTable([1, 2, 3], interval=1.0)
    for r, rtt in ((1, 5.0), (2, 2.0), (3, 9.0)):
        t.record(r, rtt, 0.0)
    assert t.choose(0.5) == 2
    for _ in range(3):
        t.record_timeout(2)
    assert 2 not in t.eligible(0.5) and t.choose(0.5) == 1
    # probes older than three intervals do not count
    assert t.eligible(3.5) == []
    with pytest.raises(NoEligibleReplica):
        t.choose(3.5)


def test_probe_tick_self_heals():
    t = ProbeTable([1, 2], interval=1.0)
    down = {2}
    ping = lambda r: None if r in down else {1: 3.0, 2: 1.0}[r]
    for k in range(3):
        probe_tick(t, ping, float(k))
    assert t.choose(2.5) == 1
    down.clear()
    probe_tick(t, ping, 3.0)
    assert t.choose(3.0) == 2


# --- randomized safety --------------------------------------------------------------------------
@pytest.mark.parametrize("replicas", [3, 5])
def test_safety_traces(replicas):
    for seed in range(60):
        r = run_trace(seed, replicas=replicas, checkpoint_every=8 if seed % 3 == 0 else 0)
        assert not r.violations, (seed, r.violations)
        assert r.converged


def test_checker_catches_planted_vote_bug(monkeypatch):
    def careless_vote(self, m):
        lg = self.log
        ok = m.term == lg.term and lg.voted_for in (-1, m.src) and self.role is not Role.LEADER
        if ok:  # grants without the up-to-date check
            lg.set_hard_state(m.term, m.src)
            self._reset_election_deadline()
        self.send(VoteReply(self.id, m.src, lg.term, ok))

    monkeypatch.setattr(RaftNode, "_on_request_vote", careless_vote)
    flagged = sum(bool(run_trace(seed, replicas=3).violations) for seed in range(60))
    assert flagged > 0


def test_trace_is_deterministic():
    a, b = run_trace(123, replicas=5), run_trace(123, replicas=5)
    key = lambda r: [(o.kind, o.args, o.invoke, o.complete, o.result) for o in r.history]
    assert key(a) == key(b) and a.committed == b.committed
