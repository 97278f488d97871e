import random

import pytest
from hypothesis import given, settings, strategies as st

from maxwellite.compute import (DuplicateUdfError, Engine, RemoteTarget, RequestContext, Result, Status,
                                account_key, command, decode_result, encode_command)
from maxwellite.consensus.log import ClientRequest
from maxwellite.datamodel import ColumnType, Schema
from maxwellite.pagestore import Store
from maxwellite.runtime import Loop

BIN = Schema([("v", ColumnType.BINARY)])
LONG = Schema([("n", ColumnType.LONG)])


def engine(**kw):
    return Engine(Store.open(None), **kw)


def open_accounts(e, balances):
    for i, b in enumerate(balances):
        assert e.execute("open", [account_key(i), b, 0]).ok


def balance(e, i):
    return decode_result(e, "query", e.execute("query", [account_key(i)]))[0]


def test_echo():
    e = engine()
    res = e.execute("echo", [b"payload"])
    assert res.ok and decode_result(e, "echo", res) == (b"payload",)


def test_register_execute_and_errors():
    e = engine()
    calls = []
    e.register_udf("twice", lambda ctx, n: (calls.append(n) or 2 * n,), LONG, LONG)
    assert decode_result(e, "twice", e.execute("twice", [21])) == (42,)
    assert calls == [21]
    with pytest.raises(DuplicateUdfError):
        e.register_udf("twice", lambda ctx, n: (n,), LONG, LONG)
    assert e.execute("nope", []).status is Status.UNKNOWN_UDF
    assert e.read(encode_command("nope", b"")).status is Status.UNKNOWN_UDF
    assert e.read(encode_command("query", b"\x01")).status is Status.DECODE_ERROR


def test_handler_error_rolls_back():
    e = engine()
    open_accounts(e, [100])
    before = e.dump()

    def half_then_fail(ctx, account):
        store, txn = ctx.store_for(account)
        store.upsert("accounts", account, (0, 99, 0, 0), txn=txn)
        raise RuntimeError("boom")

    e.register_udf("bad", half_then_fail, Schema([("a", ColumnType.BINARY)]), None)
    res = e.execute("bad", [account_key(0)])
    assert res.status is Status.HANDLER_ERROR and b"boom" in res.payload
    assert e.dump() == before


def test_transfer_examples():
    e = engine()
    open_accounts(e, [0, 0])
    res = e.execute("transfer", [account_key(0), account_key(1), 10])
    assert res.status is Status.INSUFFICIENT_FUNDS
    assert balance(e, 0) == 0 and balance(e, 1) == 0

    e = engine()
    open_accounts(e, [100, 0])
    res = e.execute("transfer", [account_key(0), account_key(1), 30])
    assert decode_result(e, "transfer", res) == (70, 1, 30, 1)
    assert (balance(e, 0), balance(e, 1)) == (70, 30)


def test_unknown_account_and_bad_amounts():
    e = engine()
    open_accounts(e, [5])
    assert e.execute("query", [b"ghost"]).status is Status.UNKNOWN_ACCOUNT
    assert e.execute("transfer", [account_key(0), b"ghost", 1]).status is Status.UNKNOWN_ACCOUNT
    assert e.execute("deposit", [account_key(0), 0]).status is Status.HANDLER_ERROR
    assert e.execute("transfer", [account_key(0), account_key(0), 1]).status is Status.HANDLER_ERROR
    assert balance(e, 0) == 5


def test_overdraft_flag():
    e = engine()
    assert e.execute("open", [b"od", 0, 1]).ok
    assert e.execute("withdraw", [b"od", 10]).ok
    assert balance_of(e, b"od") == -10


def balance_of(e, key):
    return decode_result(e, "query", e.execute("query", [key]))[0]


def test_same_key_requests_apply_in_log_order():
    e = engine()
    open_accounts(e, [0])
    # sequential oracle: each deposit result equals the running sum
    total = 0
    for amount in (5, 7, 11, 13):
        total += amount
        out = decode_result(e, "deposit", e.execute("deposit", [account_key(0), amount]))
        assert out[0] == total


def test_local_subrequests_fan_out():
    loop = Loop(deterministic_seed=0)
    e = engine()

    async def fan(ctx, n):
        outs = await loop.gather(*(ctx.spawn_subrequest(e, "echo", [bytes([i])]) for i in range(n)))
        return (sum(o[0][0] for o in outs),)

    e.register_udf("fan", fan, LONG, LONG)
    ctx = RequestContext(e, 1, 1, "fan", (8,))
    res = loop.run_until_complete(e.execute_request(ctx))
    assert res.ok and decode_result(e, "fan", res) == (sum(range(8)),)


def test_child_failure_lets_parent_decide():
    e = engine()
    open_accounts(e, [100, 0])

    async def move_then_fail(ctx, amount):
        await ctx.spawn_subrequest(e, "transfer", [account_key(0), account_key(1), amount])
        await ctx.spawn_subrequest(e, "transfer", [account_key(1), account_key(0), 10 ** 6])

    async def move_and_swallow(ctx, amount):
        await ctx.spawn_subrequest(e, "transfer", [account_key(0), account_key(1), amount])
        try:
            await ctx.spawn_subrequest(e, "transfer", [account_key(1), account_key(0), 10 ** 6])
        except Exception:
            pass

    e.register_udf("strict", move_then_fail, LONG, None)
    e.register_udf("lenient", move_and_swallow, LONG, None)
    assert e.execute("strict", [40]).status is Status.INSUFFICIENT_FUNDS
    assert (balance(e, 0), balance(e, 1)) == (100, 0)
    assert e.execute("lenient", [40]).ok
    assert (balance(e, 0), balance(e, 1)) == (60, 40)


def test_remote_target_down_rolls_back():
    loop = Loop(deterministic_seed=0)
    e = engine()
    open_accounts(e, [100, 0])

    async def down(udf, args):
        raise ConnectionRefusedError("replica down")

    remote = RemoteTarget(down)

    async def with_remote(ctx, amount):
        store, txn = ctx.store_for(account_key(0))
        await ctx.spawn_subrequest(e, "transfer", [account_key(0), account_key(1), amount])
        await ctx.spawn_subrequest(remote, "echo", [b"x"])

    e.register_udf("remote", with_remote, LONG, None)
    res = loop.run_until_complete(e.execute_request(RequestContext(e, 1, 1, "remote", (10,))))
    assert res.status is Status.UNREACHABLE
    assert balance(e, 0) == 100


def test_remote_target_roundtrip():
    loop = Loop(deterministic_seed=0)
    e, other = engine(), engine()

    async def call(udf, args):
        from maxwellite.compute import encode_command
        return other.read(encode_command(udf, args)).to_bytes()

    remote = RemoteTarget(call)

    async def ask(ctx, payload):
        return await ctx.spawn_subrequest(remote, "echo", [payload])

    e.register_udf("ask", ask, BIN, BIN)
    res = loop.run_until_complete(e.execute_request(RequestContext(e, 1, 1, "ask", (b"hi",))))
    assert decode_result(e, "ask", res) == (b"hi",)


def test_deadline_rolls_back():
    loop = Loop()
    e = engine(deadline=0.01)
    open_accounts(e, [100, 0])

    async def slow(ctx, amount):
        store, txn = ctx.store_for(account_key(0))
        store.upsert("accounts", account_key(0), (0, 1, 0, 0), txn=txn)
        from maxwellite.runtime import sleep
        await sleep(0.05)

    e.register_udf("slow", slow, LONG, None)
    res = loop.run_until_complete(e.execute_request(RequestContext(e, 1, 1, "slow", (1,))))
    assert res.status is Status.DEADLINE
    assert balance(e, 0) == 100


def test_suspending_handler_rejected_in_replicated_apply():
    e = engine()

    async def waits(ctx, n):
        from maxwellite.runtime import sleep
        await sleep(1)
        return (n,)

    e.register_udf("waits", waits, LONG, LONG)
    res = e.apply(1, 1, [ClientRequest(1, 1, command(e, "waits", 3))])[0]
    assert res.status is Status.HANDLER_ERROR and e.last_applied == 1


def test_dedup_exactly_once():
    e = engine()
    open_accounts(e, [0])
    cmd = command(e, "deposit", account_key(0), 10)
    first = e.apply(1, 1, [ClientRequest(7, 1, cmd)])[0]
    dup = e.apply(2, 1, [ClientRequest(7, 1, cmd)])[0]
    assert first == dup and balance(e, 0) == 10
    e.apply(3, 1, [ClientRequest(7, 2, cmd)])
    assert e.apply(4, 1, [ClientRequest(7, 1, cmd)])[0].status is Status.STALE_DUPLICATE
    assert balance(e, 0) == 20


def test_apply_is_ordered():
    e = engine()
    with pytest.raises(Exception):
        e.apply(2, 1, [])


def test_replay_is_deterministic():
    rng = random.Random(3)
    entries = []
    e0 = engine()
    setup = [ClientRequest(0, 0, command(e0, "open", account_key(i), 1000, 0), ts_us=1) for i in range(5)]
    entries.append(tuple(setup))
    for k in range(200):
        a, b = rng.sample(range(5), 2)
        entries.append((ClientRequest(1 + k % 3, 1 + k, command(e0, "transfer", account_key(a), account_key(b),
                                                              rng.randint(1, 400)), ts_us=10 + k),))
    dumps = []
    for _ in range(2):
        e = engine()
        for i, batch in enumerate(entries, 1):
            e.apply(i, 1, batch)
        dumps.append(e.dump())
    assert dumps[0] == dumps[1]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(1, 300)), max_size=120),
       st.lists(st.integers(0, 500), min_size=5, max_size=5))
def test_conservation_and_no_negative(transfers, initial):
    e = engine()
    open_accounts(e, initial)
    oracle = list(initial)
    for a, b, amount in transfers:
        res = e.execute("transfer", [account_key(a), account_key(b), amount])
        if a == b:
            assert not res.ok
        elif oracle[a] >= amount:
            assert res.ok
            oracle[a] -= amount
            oracle[b] += amount
        else:
            assert res.status is Status.INSUFFICIENT_FUNDS
    got = [balance(e, i) for i in range(5)]
    assert got == oracle and sum(got) == sum(initial) and min(got) >= 0


def test_sharded_engine():
    stores = [Store.open(None) for _ in range(3)]
    e = Engine(stores)
    for i in range(12):
        assert e.execute("open", [account_key(i), 10, 0]).ok
    assert sum(s.table("accounts").row_count for s in stores) == 12
    assert all(s.table("accounts").row_count > 0 for s in stores)
    assert e.execute("transfer", [account_key(0), account_key(7), 10]).ok
    assert balance(e, 0) == 0 and balance(e, 7) == 20


def test_result_roundtrip():
    r = Result(Status.INSUFFICIENT_FUNDS, b"x")
    assert Result.from_bytes(r.to_bytes()) == r
