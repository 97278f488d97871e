import os
import threading

import pytest
from hypothesis import given, settings, strategies as st

from maxwellite.runtime import (CancelledError, Event, Future, LockProbe, Loop, Queue, TaskBudgetExceeded,
                                TaskState, WrongThreadError, call_io, pread, sleep, sleep_until,
                                yield_now)


def test_noop_task_completes_on_next_turn():
    loop = Loop()
    done = []

    async def noop():
        done.append(True)

    task = loop.spawn(noop())
    assert task.state is TaskState.RUNNABLE and not done
    loop.run_once()
    assert done and task.state is TaskState.DONE


def test_counter_without_locks():
    loop = Loop()
    counter = [0]

    async def bump():
        for _ in range(10):
            v = counter[0]
            counter[0] = v + 1
            await yield_now()

    for _ in range(10_000):
        loop.spawn(bump())
    loop.run()
    assert counter[0] == 100_000


def test_spawn_from_wrong_thread():
    loop = Loop()
    errors = []

    async def noop():
        pass

    def other():
        coro = noop()
        try:
            loop.spawn(coro)
        except WrongThreadError as e:
            errors.append(e)
            coro.close()

    t = threading.Thread(target=other)
    t.start()
    t.join()
    assert len(errors) == 1


def test_task_budget():
    loop = Loop(max_tasks=2)

    async def noop():
        pass

    loop.spawn(noop())
    loop.spawn(noop())
    with pytest.raises(TaskBudgetExceeded):
        loop.spawn(noop())
    loop.run()
    loop.spawn(noop())
    loop.run()


def test_yields_alternate_strictly():
    loop = Loop()
    trace = []

    async def writer(ch):
        for _ in range(5):
            trace.append(ch)
            await yield_now()

    loop.spawn(writer("A"))
    loop.spawn(writer("B"))
    loop.run()
    assert "".join(trace) == "ABABABABAB"


def test_await_io_reads_a_page(tmp_path):
    path = tmp_path / "f"
    path.write_bytes(bytes(range(256)) * 32)
    fd = os.open(path, os.O_RDONLY)
    loop = Loop()

    async def reader():
        return await loop.await_io(pread(fd, 4096, 0))

    try:
        data = loop.run_until_complete(reader())
    finally:
        os.close(fd)
    assert data == bytes(range(256)) * 16 and len(data) == 4096
    assert loop.stats.io_ops == 1


def test_io_error_surfaces_in_task():
    loop = Loop()

    def boom():
        raise OSError(5, "EIO")

    async def task():
        try:
            await loop.await_io(call_io(boom))
        except OSError as e:
            return e.errno

    assert loop.run_until_complete(task()) == 5


def test_io_ops_are_batched_across_tasks(tmp_path):
    loop = Loop()
    fd = os.open(tmp_path / "f", os.O_RDWR | os.O_CREAT)

    async def worker(i):
        for j in range(10):
            await loop.await_io(call_io(lambda: os.pwrite(fd, b"x", i * 10 + j)))

    for i in range(100):
        loop.spawn(worker(i))
    loop.run()
    os.close(fd)
    assert loop.stats.io_ops == 1000
    assert loop.stats.max_io_batch == 100
    assert loop.stats.io_batches == 10


def test_single_task_thousand_io_ops(tmp_path):
    loop = Loop()
    fd = os.open(tmp_path / "f", os.O_RDWR | os.O_CREAT)

    async def worker():
        for j in range(1000):
            await loop.await_io(call_io(lambda j=j: os.pwrite(fd, b"y", j)))

    loop.run_until_complete(worker())
    os.close(fd)
    assert loop.stats.io_ops == 1000 and loop.stats.max_io_batch >= 1


def test_sleep_until_past_deadline_resumes_next_turn():
    loop = Loop(deterministic_seed=1, start_time=100.0)
    woke = []

    async def t():
        await sleep_until(50.0)
        woke.append(loop.time())

    loop.spawn(t())
    loop.run_once()
    assert not woke
    loop.run_once()
    assert woke == [100.0]


def test_virtual_clock_jumps_to_timers():
    loop = Loop(deterministic_seed=3)
    seen = []

    async def t(d):
        await sleep(d)
        seen.append((d, loop.time()))

    for d in (5.0, 1.0, 3.0):
        loop.spawn(t(d))
    loop.run()
    assert seen == [(1.0, 1.0), (3.0, 3.0), (5.0, 5.0)]


def test_empty_loop_with_stop_exits():
    loop = Loop()
    loop.call_soon(loop.stop)
    loop.run(until_idle=False)
    assert loop.stats.iterations >= 1


def test_post_from_other_thread_wakes_loop():
    loop = Loop()
    got = []
    loop.call_later(5.0, loop.stop)  # safety net
    threading.Timer(0.05, lambda: loop.post(lambda: (got.append(1), loop.stop()))).start()
    loop._ensure_selector()
    loop.run(until_idle=False)
    loop.close()
    assert got == [1]


def test_cpu_burn_starves_others():
    loop = Loop(deterministic_seed=0)
    trace = []

    async def burner():
        for _ in range(100_000):
            pass
        trace.append("burn-done")

    async def victim():
        trace.append("victim")

    loop.spawn(burner())
    loop.spawn(victim())
    loop.run()
    assert trace == ["burn-done", "victim"]


def test_queue_and_event():
    loop = Loop(deterministic_seed=0)
    q = Queue()
    ev = Event()
    out = []

    async def consumer():
        for _ in range(3):
            out.append(await q.get())
        ev.set()

    async def producer():
        for i in range(3):
            await sleep(1.0)
            q.put_nowait(i)
        await ev.wait()
        out.append("done")

    loop.spawn(consumer())
    loop.spawn(producer())
    loop.run()
    assert out == [0, 1, 2, "done"]


def test_cancel_and_wait_for_timeout():
    loop = Loop(deterministic_seed=0)

    async def forever():
        await Future()

    async def main():
        t = loop.spawn(forever())
        with pytest.raises(TimeoutError):
            await loop.wait_for(t, 2.0)
        assert loop.time() == 2.0
        t.cancel()
        with pytest.raises(CancelledError):
            await t
        return "ok"

    assert loop.run_until_complete(main()) == "ok"


def test_gather_collects_in_order():
    loop = Loop(deterministic_seed=0)

    async def val(i):
        await sleep(10 - i)
        return i * i

    async def main():
        return await loop.gather(*(val(i) for i in range(8)))

    assert loop.run_until_complete(main()) == [i * i for i in range(8)]


def test_waiting_task_becomes_runnable_within_one_iteration():
    loop = Loop(deterministic_seed=0)
    fut = Future()

    async def waiter():
        return await fut

    t = loop.spawn(waiter())
    loop.run_once()
    assert t.state is TaskState.WAITING_MESSAGE
    fut.set_result(7)
    assert t.state is TaskState.RUNNABLE
    loop.run_once()
    assert t.result() == 7


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.lists(st.integers(1, 5), min_size=1, max_size=20), st.integers(0, 2**32))
def test_run_to_yield_atomicity(n_tasks, steps, seed):
    """Two-field invariant a == b is only broken between yields, never across."""
    loop = Loop(deterministic_seed=seed)
    state = {"a": 0, "b": 0}
    violations = []

    async def mutator(i):
        for s in steps:
            state["a"] += s
            for _ in range(i % 3):
                pass
            state["b"] += s
            await yield_now()

    async def probe():
        for _ in range(len(steps) * n_tasks):
            if state["a"] != state["b"]:
                violations.append(dict(state))
            await yield_now()

    for i in range(n_tasks):
        loop.spawn(mutator(i))
    loop.spawn(probe())
    loop.run()
    assert not violations
    assert state["a"] == state["b"] == sum(steps) * n_tasks


def test_request_path_takes_no_locks():
    loop = Loop(deterministic_seed=0)
    q = Queue()

    async def server():
        for _ in range(1000):
            item = await q.get()
            item.set_result(item)

    async def client():
        for _ in range(1000):
            f = Future()
            q.put_nowait(f)
            await f

    loop.spawn(server())
    loop.spawn(client())
    with LockProbe() as probe:
        loop.run()
    assert probe.acquisitions == 0

    with LockProbe() as probe:
        lock = threading.Lock()
        lock.acquire()
        lock.release()
        cond = threading.Condition()
        with cond:
            pass
    assert probe.acquisitions == 2
