from maxwellite.compute import Result, Status, account_key, standard_udfs
from maxwellite.consensus.node import Future, RaftNode
from maxwellite.consensus.sim import run_trace
from maxwellite.datamodel import encode_row
from maxwellite.lincheck import HistoryOp, check_account_history, check_linearizable

A, B = account_key(0), account_key(1)
UDFS = standard_udfs()


def ok(kind, *vals):
    return Result(Status.OK, encode_row(UDFS[kind].result, vals))


def q(bal, ver):
    return ok("query", bal, ver, 0)


def dep(bal, ver):
    return ok("deposit", bal, ver, 0)


def test_sequential_history_ok():
    h = [HistoryOp("deposit", (A, 5), 0, 1, dep(5, 1)), HistoryOp("query", (A,), 2, 3, q(5, 1))]
    r = check_account_history(h, [A, B], 0)
    assert r.ok and r.linearization == [0, 1]


def test_concurrent_read_may_see_either_side():
    for seen in (q(0, 0), q(5, 1)):
        h = [HistoryOp("deposit", (A, 5), 0, 10, dep(5, 1)), HistoryOp("query", (A,), 1, 2, seen)]
        assert check_account_history(h, [A, B], 0).ok


def test_stale_read_after_completed_write_rejected():
    h = [HistoryOp("deposit", (A, 5), 0, 1, dep(5, 1)), HistoryOp("query", (A,), 2, 3, q(0, 0))]
    r = check_account_history(h, [A, B], 0)
    assert not r.ok and r.reason == "no valid linearization"


def test_fabricated_value_rejected():
    h = [HistoryOp("query", (A,), 0, 1, q(7, 1))]
    assert not check_account_history(h, [A, B], 0).ok


def test_pending_write_may_or_may_not_apply():
    pend = HistoryOp("deposit", (A, 5), 0, None, None)
    assert check_account_history([pend, HistoryOp("query", (A,), 1, 2, q(5, 1))], [A, B], 0).ok
    assert check_account_history([pend, HistoryOp("query", (A,), 1, 2, q(0, 0))], [A, B], 0).ok
    # but it cannot take effect twice
    assert not check_account_history([pend, HistoryOp("query", (A,), 1, 2, q(10, 2))], [A, B], 0).ok


def test_transfer_and_insufficient_funds():
    tr = ok("transfer", 3, 1, 17, 1)
    h = [HistoryOp("transfer", (A, B, 7), 0, 1, tr),
         HistoryOp("transfer", (A, B, 7), 2, 3, Result(Status.INSUFFICIENT_FUNDS, b"")),
         HistoryOp("query", (B,), 4, 5, q(17, 1))]
    assert check_account_history(h, [A, B], 10).ok
    h[1] = HistoryOp("transfer", (A, B, 2), 2, 3, Result(Status.INSUFFICIENT_FUNDS, b""))
    assert not check_account_history(h, [A, B], 10).ok


def test_generic_register_model():
    # a plain read/write register: the classic non-linearizable pattern
    def step(state, op):
        if op.kind == "w":
            return op.args[0]
        return state if op.result is None or op.result == state else None

    good = [HistoryOp("w", (1,), 0, 5, None), HistoryOp("r", (), 1, 2, 1), HistoryOp("r", (), 3, 4, 1)]
    bad = [HistoryOp("w", (1,), 0, 5, None), HistoryOp("r", (), 1, 2, 1), HistoryOp("r", (), 3, 4, 0)]
    assert check_linearizable(good, 0, step).ok
    assert not check_linearizable(bad, 0, step).ok


def test_fault_runs_with_leader_kill_are_linearizable():
    for seed in range(15):
        r = run_trace(seed, replicas=3, kill_leader_at=0.15)
        assert r.leader_kills == 1 and not r.violations
        res = check_account_history(r.history, [account_key(i) for i in range(3)], 100)
        assert res.ok, (seed, res.reason)


def test_checker_catches_planted_stale_read(monkeypatch):
    # bug: any replica answers "strong" reads from its local state
    real = RaftNode.submit

    def local_reads(self, req):
        if req.read and self.running:
            fut = Future()
            fut.set_result(self.weak_read(req.command))
            return fut
        return real(self, req)

    monkeypatch.setattr(RaftNode, "submit", local_reads)
    bad = 0
    for seed in range(40):
        r = run_trace(seed, replicas=3, kill_leader_at=0.15)
        bad += not check_account_history(r.history, [account_key(i) for i in range(3)], 100).ok
    assert bad > 0
