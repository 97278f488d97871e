"""Single-threaded cooperative runtime.

One :class:`Loop` per engine thread drives native ``async def`` coroutines.
Tasks run until they await something (a yield, a timer, an IO operation, a
future or a socket) and nothing else runs in between, so engine state needs no
locks. File IO submitted with :meth:`Loop.await_io` is collected per loop
turn and issued as one batch; completions come back through the loop.

Deterministic mode replaces the wall clock with a virtual one that jumps to
the next timer when the loop is idle, and breaks ties between equal deadlines
with a seeded RNG, so whole-cluster simulations replay exactly.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import logging
import os
import random
import selectors
import socket
import sys
import threading
import time
import types
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Coroutine

log = logging.getLogger(__name__)


class RuntimeErrorBase(RuntimeError):
    pass


class WrongThreadError(RuntimeErrorBase):
    pass


class TaskBudgetExceeded(RuntimeErrorBase):
    pass


class CancelledError(BaseException):
    pass


class TaskState(enum.Enum):
    RUNNABLE = "runnable"
    WAITING_IO = "waiting_io"
    WAITING_TIMER = "waiting_timer"
    WAITING_MESSAGE = "waiting_message"
    DONE = "done"


_running = threading.local()


def current_loop() -> "Loop":
    loop = getattr(_running, "loop", None)
    if loop is None:
        raise RuntimeErrorBase("no loop is running on this thread")
    return loop


# --- futures and tasks ----------------------------------------------------------

_PENDING = object()


class Future:
    __slots__ = ("_result", "_exc", "_callbacks")

    def __init__(self):
        self._result = _PENDING
        self._exc: BaseException | None = None
        self._callbacks: list[Callable[["Future"], None]] = []

    def done(self) -> bool:
        return self._result is not _PENDING or self._exc is not None

    def result(self):
        if self._exc is not None:
            raise self._exc
        if self._result is _PENDING:
            raise RuntimeErrorBase("future not done")
        return self._result

    def exception(self) -> BaseException | None:
        return self._exc

    def set_result(self, value) -> None:
        if self.done():
            raise RuntimeErrorBase("future already done")
        self._result = value
        self._fire()

    def set_exception(self, exc: BaseException) -> None:
        if self.done():
            raise RuntimeErrorBase("future already done")
        self._exc = exc
        self._fire()

    def try_set_result(self, value) -> bool:
        if self.done():
            return False
        self.set_result(value)
        return True

    def try_set_exception(self, exc: BaseException) -> bool:
        if self.done():
            return False
        self.set_exception(exc)
        return True

    def add_done_callback(self, fn: Callable[["Future"], None]) -> None:
        if self.done():
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    def __await__(self):
        if not self.done():
            yield ("wait", self)
        return self.result()


class Task(Future):
    __slots__ = ("task_id", "name", "coro", "state", "loop", "_send", "_throw", "_cancel_requested", "_gen")

    def __init__(self, loop: "Loop", task_id: int, coro: Coroutine, name: str | None):
        super().__init__()
        self.loop = loop
        self.task_id = task_id
        self.name = name or f"task-{task_id}"
        self.coro = coro
        self.state = TaskState.RUNNABLE
        self._send = None
        self._throw: BaseException | None = None
        self._cancel_requested = False
        # bumped on every suspension; wakeups carrying an older value are stale
        self._gen = 0

    def cancel(self) -> bool:
        if self.done():
            return False
        self._cancel_requested = True
        if self.state is not TaskState.RUNNABLE:
            self.loop._wake(self, exc=CancelledError())
        return True

    def __repr__(self) -> str:
        return f"<Task {self.name} {self.state.value}>"


@types.coroutine
def _trap(*op):
    return (yield op)


async def yield_now() -> None:
    """Let every other runnable task run once before continuing."""
    await _trap("yield")


async def sleep(delay: float) -> None:
    await _trap("sleep", current_loop().time() + max(0.0, delay))


async def sleep_until(deadline: float) -> None:
    await _trap("sleep", deadline)


async def wait_readable(sock) -> None:
    await _trap("read", sock)


async def wait_writable(sock) -> None:
    await _trap("write", sock)


# --- IO batching -------------------------------------------------------------------

@dataclass
class IoOp:
    """A file operation executed by the loop on the task's behalf."""
    fn: Callable[[], Any]
    label: str = "io"
    future: Future = field(default_factory=Future)


def pread(fd: int, n: int, offset: int) -> IoOp:
    return IoOp(lambda: os.pread(fd, n, offset), "pread")


def pwrite(fd: int, data: bytes, offset: int) -> IoOp:
    return IoOp(lambda: os.pwrite(fd, data, offset), "pwrite")


def fsync(fd: int) -> IoOp:
    return IoOp(lambda: os.fsync(fd), "fsync")


def call_io(fn: Callable[[], Any], label: str = "call") -> IoOp:
    return IoOp(fn, label)


@dataclass
class LoopStats:
    iterations: int = 0
    tasks_spawned: int = 0
    steps: int = 0
    io_ops: int = 0
    io_batches: int = 0
    max_io_batch: int = 0
    timers_fired: int = 0
    lock_acquisitions: int = 0
    parks: int = 0


class Handle:
    __slots__ = ("fn", "args", "cancelled", "when")

    def __init__(self, fn, args, when=0.0):
        self.fn = fn
        self.args = args
        self.cancelled = False
        self.when = when

    def cancel(self) -> None:
        self.cancelled = True


# --- the loop --------------------------------------------------------------------------

class Loop:
    def __init__(self, *, max_tasks: int = 100_000, deterministic_seed: int | None = None,
                 io_backend: str = "portable", start_time: float = 0.0):
        if io_backend not in ("portable", "native"):
            raise ValueError(f"unknown io backend {io_backend!r}")
        if io_backend == "native":
            # no kernel batch-IO interface is reachable from the stdlib
            log.info("native io backend unavailable; using portable batching")
        self.io_backend = "portable"
        self.max_tasks = max_tasks
        self.deterministic = deterministic_seed is not None
        self.rng = random.Random(deterministic_seed)
        self._virtual_now = start_time
        self._ready: deque = deque()
        self._timers: list = []
        self._seq = itertools.count()
        self._task_ids = itertools.count(1)
        self._io_batch: list[tuple[IoOp, Task, int]] = []
        self._inflight_io = 0
        self.live_tasks = 0
        self.stats = LoopStats()
        self.current: Task | None = None
        self._owner = threading.get_ident()
        self._stopping = False
        self._posted: deque = deque()
        self._selector: selectors.BaseSelector | None = None
        self._waker: tuple[socket.socket, socket.socket] | None = None
        self._io_waiters: dict[tuple[int, int], tuple[Task, int]] = {}
        self.unhandled: list[tuple[Task, BaseException]] = []

    # --- clock -------------------------------------------------------------------
    def time(self) -> float:
        return self._virtual_now if self.deterministic else time.monotonic()

    # --- scheduling -------------------------------------------------------------
    def _check_thread(self) -> None:
        if threading.get_ident() != self._owner:
            raise WrongThreadError("loop used from a thread other than its engine thread")

    def spawn(self, coro: Coroutine, name: str | None = None) -> Task:
        self._check_thread()
        if self.live_tasks >= self.max_tasks:
            coro.close()
            raise TaskBudgetExceeded(f"task budget of {self.max_tasks} exhausted")
        task = Task(self, next(self._task_ids), coro, name)
        self.live_tasks += 1
        self.stats.tasks_spawned += 1
        self._ready.append((self._step, (task,)))
        return task

    def call_soon(self, fn: Callable, *args) -> Handle:
        h = Handle(fn, args)
        self._ready.append((self._run_handle, (h,)))
        return h

    def call_at(self, when: float, fn: Callable, *args) -> Handle:
        h = Handle(fn, args, when)
        tie = self.rng.random() if self.deterministic else 0.0
        heapq.heappush(self._timers, (when, tie, next(self._seq), h))
        return h

    def call_later(self, delay: float, fn: Callable, *args) -> Handle:
        return self.call_at(self.time() + delay, fn, *args)

    def post(self, fn: Callable, *args) -> None:
        """Thread-safe entry point: run ``fn(*args)`` on the engine thread."""
        self._posted.append((fn, args))
        if self._waker is not None:
            try:
                self._waker[1].send(b"\x00")
            except (BlockingIOError, OSError):
                pass

    def stop(self) -> None:
        self._stopping = True

    def _run_handle(self, h: Handle) -> None:
        if not h.cancelled:
            h.fn(*h.args)

    def _wake(self, task: Task, value=None, exc: BaseException | None = None, gen: int | None = None) -> None:
        if task.state is TaskState.DONE:
            return
        if gen is not None and gen != task._gen:
            return
        if task.state is TaskState.RUNNABLE and task._throw is None and exc is None:
            return
        task.state = TaskState.RUNNABLE
        task._send = value
        if exc is not None:
            task._throw = exc
        self._ready.append((self._step, (task,)))

    def _step(self, task: Task) -> None:
        if task.state is TaskState.DONE:
            return
        self.current = task
        self.stats.steps += 1
        try:
            if task._cancel_requested and task._throw is None:
                task._throw = CancelledError()
            if task._throw is not None:
                exc, task._throw = task._throw, None
                op = task.coro.throw(exc)
            else:
                value, task._send = task._send, None
                op = task.coro.send(value)
        except StopIteration as e:
            self._finish(task, result=e.value)
        except CancelledError as e:
            self._finish(task, exc=e)
        except Exception as e:
            self._finish(task, exc=e)
        else:
            self._handle(task, op)
        finally:
            self.current = None

    def _finish(self, task: Task, result=None, exc: BaseException | None = None) -> None:
        task.state = TaskState.DONE
        self.live_tasks -= 1
        if exc is None:
            task.set_result(result)
            return
        if not task._callbacks and not isinstance(exc, CancelledError):
            self.unhandled.append((task, exc))
            log.debug("task %s failed: %r", task.name, exc)
        task.set_exception(exc)

    def _handle(self, task: Task, op) -> None:
        kind = op[0]
        task._gen += 1
        gen = task._gen
        if kind == "yield":
            self._ready.append((self._step, (task,)))
        elif kind == "sleep":
            task.state = TaskState.WAITING_TIMER
            self.call_at(op[1], self._wake, task, None, None, gen)
        elif kind == "wait":
            fut: Future = op[1]
            task.state = TaskState.WAITING_MESSAGE
            fut.add_done_callback(lambda f, t=task, g=gen: self._wake(t, gen=g))
        elif kind == "io":
            task.state = TaskState.WAITING_IO
            self._io_batch.append((op[1], task, gen))
            self._inflight_io += 1
        elif kind in ("read", "write"):
            if self.deterministic:
                self._wake(task, exc=RuntimeErrorBase("sockets are not available in deterministic mode"))
                return
            task.state = TaskState.WAITING_IO
            self._register(task, op[1], selectors.EVENT_READ if kind == "read" else selectors.EVENT_WRITE)
        else:
            self._wake(task, exc=RuntimeErrorBase(f"unknown trap {op!r}"))

    # --- IO ---------------------------------------------------------------------------
    async def await_io(self, op: IoOp):
        """Queue a file operation for the next batch and wait for its result."""
        return await _trap("io", op)

    def _submit_io(self) -> None:
        batch, self._io_batch = self._io_batch, []
        if not batch:
            return
        st = self.stats
        st.io_batches += 1
        st.io_ops += len(batch)
        st.max_io_batch = max(st.max_io_batch, len(batch))
        for op, task, gen in batch:
            self._inflight_io -= 1
            try:
                res = op.fn()
            except OSError as e:
                op.future.set_exception(e)
                self._wake(task, exc=e, gen=gen)
            else:
                op.future.set_result(res)
                self._wake(task, res, gen=gen)

    def _ensure_selector(self) -> selectors.BaseSelector:
        if self._selector is None:
            self._selector = selectors.DefaultSelector()
            r, w = socket.socketpair()
            r.setblocking(False)
            w.setblocking(False)
            self._waker = (r, w)
            self._selector.register(r, selectors.EVENT_READ, None)
        return self._selector

    def _register(self, task: Task, sock, event: int) -> None:
        sel = self._ensure_selector()
        fd = sock if isinstance(sock, int) else sock.fileno()
        self._io_waiters[(fd, event)] = (task, task._gen)
        mask = event
        try:
            key = sel.get_key(fd)
            mask |= key.events
            sel.modify(fd, mask, None)
        except KeyError:
            sel.register(fd, mask, None)

    def _poll(self, timeout: float | None) -> None:
        sel = self._selector
        if sel is None:
            if timeout:
                time.sleep(timeout)
            return
        for key, mask in sel.select(timeout):
            if self._waker is not None and key.fileobj is self._waker[0]:
                try:
                    self._waker[0].recv(4096)
                except BlockingIOError:
                    pass
                continue
            fd = key.fd
            for ev in (selectors.EVENT_READ, selectors.EVENT_WRITE):
                if mask & ev:
                    waiter = self._io_waiters.pop((fd, ev), None)
                    if waiter is not None:
                        self._wake(waiter[0], gen=waiter[1])
            remaining = sum(ev for ev in (selectors.EVENT_READ, selectors.EVENT_WRITE)
                            if (fd, ev) in self._io_waiters)
            if remaining:
                sel.modify(fd, remaining, None)
            else:
                sel.unregister(fd)

    def forget_fd(self, sock) -> None:
        """Drop selector state for a socket that is being closed."""
        fd = sock if isinstance(sock, int) else sock.fileno()
        if fd < 0:
            return
        for ev in (selectors.EVENT_READ, selectors.EVENT_WRITE):
            waiter = self._io_waiters.pop((fd, ev), None)
            if waiter is not None:
                self._wake(waiter[0], exc=ConnectionAbortedError("socket closed"), gen=waiter[1])
        if self._selector is not None:
            try:
                self._selector.unregister(fd)
            except (KeyError, ValueError):
                pass

    # --- driving -------------------------------------------------------------------------
    def _expire_timers(self) -> None:
        now = self.time()
        timers = self._timers
        while timers and timers[0][0] <= now:
            _, _, _, h = heapq.heappop(timers)
            if not h.cancelled:
                self.stats.timers_fired += 1
                h.fn(*h.args)

    def _drain_posted(self) -> None:
        posted = self._posted
        while posted:
            fn, args = posted.popleft()
            self._ready.append((fn, args))

    def _idle(self) -> bool:
        return (not self._ready and not self._io_batch and not self._io_waiters
                and not self._posted and not any(not t[3].cancelled for t in self._timers))

    def run_once(self, block: bool = True) -> None:
        """One loop turn: expire timers, run what is runnable, submit IO, poll."""
        self.stats.iterations += 1
        self._drain_posted()
        self._expire_timers()
        ready = self._ready
        for _ in range(len(ready)):
            fn, args = ready.popleft()
            fn(*args)
        self._submit_io()
        if self._stopping:
            return
        if ready or self._posted or self._io_batch:
            self._poll(0) if self._selector is not None else None
            return
        # nothing runnable: park until the next timer or socket event
        timers = self._timers
        while timers and timers[0][3].cancelled:
            heapq.heappop(timers)
        if self.deterministic:
            if timers:
                self._virtual_now = max(self._virtual_now, timers[0][0])
            return
        if not block:
            self._poll(0) if self._selector is not None else None
            return
        timeout = None if not timers else max(0.0, timers[0][0] - time.monotonic())
        if timeout is None and self._selector is None:
            return
        self.stats.parks += 1
        self._poll(timeout)

    def run(self, until_idle: bool = True, deadline: float | None = None) -> None:
        """Run until :meth:`stop`, until nothing is left to do (``until_idle``),
        or until the loop clock passes ``deadline``."""
        self._owner = threading.get_ident()
        prev = getattr(_running, "loop", None)
        _running.loop = self
        self._stopping = False
        try:
            while not self._stopping:
                if until_idle and self._idle():
                    break
                if deadline is not None and self.time() >= deadline:
                    break
                self.run_once()
                if deadline is not None and self.deterministic and self.time() > deadline:
                    self._virtual_now = deadline
                    break
        finally:
            _running.loop = prev

    def run_until_complete(self, coro: Coroutine, timeout: float | None = None):
        task = self.spawn(coro, name="main") if not isinstance(coro, Future) else coro
        task.add_done_callback(lambda f: self.stop())
        deadline = None if timeout is None else self.time() + timeout
        self.run(until_idle=True, deadline=deadline)
        if not task.done():
            raise TimeoutError("run_until_complete timed out")
        return task.result()

    def run_for(self, duration: float) -> None:
        """Run for ``duration`` loop-clock seconds (virtual in deterministic mode)."""
        self.run(until_idle=False, deadline=self.time() + duration)

    def close(self) -> None:
        if self._selector is not None:
            self._selector.close()
            self._selector = None
        if self._waker is not None:
            for s in self._waker:
                s.close()
            self._waker = None

    # --- helpers for engine code -------------------------------------------------------
    async def wait_for(self, fut: Future, timeout: float | None):
        """Await ``fut``; raise TimeoutError after ``timeout`` loop seconds."""
        if timeout is None or fut.done():
            return await fut
        waiter = Future()
        fut.add_done_callback(lambda f: waiter.try_set_result(None))
        h = self.call_later(timeout, lambda: waiter.try_set_exception(TimeoutError()))
        try:
            await waiter
        finally:
            h.cancel()
        return fut.result()

    def gather(self, *aws) -> Future:
        """Future resolving to the results of all awaitables, in order; the
        first failure wins."""
        out = Future()
        items = [a if isinstance(a, Future) else self.spawn(a) for a in aws]
        results = [None] * len(items)
        remaining = [len(items)]
        if not items:
            out.set_result([])
            return out

        def done(i, f):
            if out.done():
                return
            if f.exception() is not None:
                out.set_exception(f.exception())
                return
            results[i] = f.result()
            remaining[0] -= 1
            if remaining[0] == 0:
                out.set_result(results)

        for i, f in enumerate(items):
            f.add_done_callback(lambda f, i=i: done(i, f))
        return out


class Queue:
    """Unbounded FIFO whose ``get`` parks the task until an item arrives."""

    def __init__(self):
        self._items: deque = deque()
        self._getters: deque[Future] = deque()

    def put_nowait(self, item) -> None:
        while self._getters:
            g = self._getters.popleft()
            if not g.done():
                g.set_result(item)
                return
        self._items.append(item)

    async def get(self):
        if self._items:
            return self._items.popleft()
        fut = Future()
        self._getters.append(fut)
        return await fut

    def get_nowait(self):
        return self._items.popleft()

    def __len__(self) -> int:
        return len(self._items)


class Event:
    def __init__(self):
        self._fut = Future()

    def is_set(self) -> bool:
        return self._fut.done()

    def set(self) -> None:
        self._fut.try_set_result(True)

    def clear(self) -> None:
        if self._fut.done():
            self._fut = Future()

    async def wait(self) -> None:
        await self._fut


class LockProbe:
    """Counts blocking lock acquisitions made on the current thread.

    Installs a profile hook for the duration of the ``with`` block and counts
    C-level ``acquire``/``__enter__`` calls on lock objects. That covers ``Condition``,
    ``queue.Queue``, ``logging`` and friends, which all call ``acquire``
    explicitly; a bare ``with lock:`` goes through a type slot the profiler
    never sees and is not counted.
    """

    _LOCK_TYPES = (type(threading.Lock()), type(threading.RLock()))

    def __init__(self):
        self.acquisitions = 0
        self._prev = None

    def _hook(self, frame, event, arg):
        if event == "c_call" and getattr(arg, "__name__", "") in ("acquire", "__enter__"):
            if isinstance(getattr(arg, "__self__", None), self._LOCK_TYPES):
                self.acquisitions += 1

    def __enter__(self):
        self._prev = sys.getprofile()
        sys.setprofile(self._hook)
        return self

    def __exit__(self, *exc):
        sys.setprofile(self._prev)
