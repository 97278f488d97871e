"""Linearizability checking of recorded client histories.

Wing & Gong style search with memoisation on (linearized-set, model-state):
an operation may be linearized next only if it was invoked before every
still-unlinearized completed operation returned. Operations without a
response (client gave up, outcome unknown) may take effect anywhere after
their invocation, or not at all.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .compute import Status, standard_udfs
from .datamodel import decode_row


@dataclass
class HistoryOp:
    kind: str
    args: tuple
    invoke: float
    complete: float | None
    result: Any = None


@dataclass
class CheckResult:
    ok: bool
    ops: int
    explored: int
    linearization: list[int] | None = None
    reason: str = ""


def check_linearizable(history: Sequence, init_state, step: Callable, max_states: int = 2_000_000) -> CheckResult:
    """``step(state, op) -> new_state or None`` returns None when ``op`` (with
    its recorded result, if any) is impossible in ``state``."""
    ops = sorted(history, key=lambda o: o.invoke)
    n = len(ops)
    done = 0
    for i, o in enumerate(ops):
        if o.complete is not None:
            done |= 1 << i
    seen = set()
    stack = [(0, init_state, ())]
    explored = 0
    while stack:
        mask, state, order = stack.pop()
        if mask & done == done:
            return CheckResult(True, n, explored, list(order))
        key = (mask, state)
        if key in seen:
            continue
        seen.add(key)
        explored += 1
        if explored > max_states:
            return CheckResult(False, n, explored, reason="search budget exhausted")
        horizon = min(ops[i].complete for i in range(n) if done >> i & 1 and not mask >> i & 1)
        for i in range(n):
            if mask >> i & 1:
                continue
            o = ops[i]
            if o.invoke > horizon:
                break
            ns = step(state, o)
            if ns is not None:
                stack.append((mask | 1 << i, ns, order + (i,)))
    return CheckResult(False, n, explored, reason="no valid linearization")


class AccountModel:
    """Sequential specification of the accounting registers: state is a tuple
    of (balance, version) per account."""

    def __init__(self, accounts: Sequence[bytes], initial: int = 0):
        self.index = {a: i for i, a in enumerate(accounts)}
        self.init_state = tuple((initial, 0) for _ in accounts)
        self.udfs = standard_udfs()

    def _out(self, op):
        res = op.result
        if res is None:
            return None
        if res.status is not Status.OK:
            return res.status
        return decode_row(self.udfs[op.kind].result, res.payload)

    def step(self, state, op):
        out = self._out(op)
        if op.kind == "query":
            bal, ver = state[self.index[op.args[0]]]
            if out is None:
                return state
            return state if isinstance(out, tuple) and out[:2] == (bal, ver) else None
        if op.kind == "deposit":
            a, amount = op.args
            i = self.index[a]
            bal, ver = state[i]
            new = (bal + amount, ver + 1)
            if out is not None and (not isinstance(out, tuple) or out[:2] != new):
                return None
            return state[:i] + (new,) + state[i + 1:]
        if op.kind == "transfer":
            src, dst, amount = op.args
            si, di = self.index[src], self.index[dst]
            (sb, sv), (db, dv) = state[si], state[di]
            if sb < amount:
                if out is None or out is Status.INSUFFICIENT_FUNDS:
                    return state
                return None
            s2, d2 = (sb - amount, sv + 1), (db + amount, dv + 1)
            if out is not None and out != (s2[0], s2[1], d2[0], d2[1]):
                return None
            st = list(state)
            st[si], st[di] = s2, d2
            return tuple(st)
        raise ValueError(f"operation {op.kind!r} is not part of the account model")


def check_account_history(history: Sequence, accounts: Sequence[bytes], initial: int) -> CheckResult:
    model = AccountModel(accounts, initial)
    # reads that never answered constrain nothing
    ops = [o for o in history if not (o.kind == "query" and o.complete is None)]
    return check_linearizable(ops, model.init_state, model.step)
