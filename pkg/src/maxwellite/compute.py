"""Compute engine: user-defined functions executed against one or more stores.

Requests are small records ``(client_id, request_id, udf, args)``; ``args`` and
results are rows encoded with a per-UDF :class:`~maxwellite.datamodel.Schema`.
Under replication every write goes through :meth:`Engine.apply`, which runs the
handler inside a transaction, records the outcome in the dedup table and
advances ``last_applied`` -- all deterministically, so replaying the same log
on a fresh replica yields the same logical state.
"""
from __future__ import annotations

import enum
import inspect
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Sequence

from .datamodel import ColumnType, DataModelError, Schema, decode_row, encode_row
from .pagestore import MemFile, Store, StoreConfig, Txn
from .pagestore.format import StoreError


def _S(*cols) -> Schema:
    return Schema(list(cols))


ACCOUNTS = "accounts"
DEDUP = "dedup"
APPLIED = "applied"

ACCOUNT_SCHEMA = _S(("balance", ColumnType.LONG), ("version", ColumnType.LONG),
                   ("updated_at", ColumnType.LONG), ("overdraft", ColumnType.INTEGER))
DEDUP_SCHEMA = _S(("request_id", ColumnType.LONG), ("status", ColumnType.INTEGER),
                 ("result", ColumnType.BINARY))
APPLIED_SCHEMA = _S(("index", ColumnType.LONG), ("term", ColumnType.LONG))
_APPLIED_KEY = b"last"
_U64 = struct.Struct(">Q")


class Status(enum.IntEnum):
    OK = 0
    UNKNOWN_UDF = 1
    DECODE_ERROR = 2
    HANDLER_ERROR = 3
    DEADLINE = 4
    INSUFFICIENT_FUNDS = 5
    UNKNOWN_ACCOUNT = 6
    NOT_LEADER = 7
    STALE_DUPLICATE = 8
    UNREACHABLE = 9
    TIMEOUT = 10
    READ_ONLY = 11
    SHUTDOWN = 12


class ComputeError(Exception):
    status = Status.HANDLER_ERROR

    def __init__(self, message: str = "", status: Status | None = None):
        super().__init__(message)
        if status is not None:
            self.status = status


class UnknownUdfError(ComputeError):
    status = Status.UNKNOWN_UDF


class DuplicateUdfError(ComputeError, ValueError):
    pass


class InsufficientFunds(ComputeError):
    status = Status.INSUFFICIENT_FUNDS


class UnknownAccount(ComputeError):
    status = Status.UNKNOWN_ACCOUNT


class DeadlineExceeded(ComputeError):
    status = Status.DEADLINE


class Unreachable(ComputeError):
    status = Status.UNREACHABLE


class SuspendedApply(ComputeError):
    """A handler tried to wait on real IO while running under replicated apply."""


@dataclass(frozen=True)
class Result:
    status: Status
    payload: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def to_bytes(self) -> bytes:
        return bytes([self.status]) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Result":
        if not data:
            raise DataModelError("empty result")
        return cls(Status(data[0]), bytes(data[1:]))

    def __repr__(self):
        return f"Result({self.status.name}, {self.payload!r})"


# --- request commands ---------------------------------------------------------------------
def encode_command(udf: str, args: bytes) -> bytes:
    name = udf.encode()
    if len(name) > 255:
        raise DataModelError("udf name too long")
    return bytes([len(name)]) + name + args


def decode_command(data: bytes) -> tuple[str, bytes]:
    if not data or len(data) < 1 + data[0]:
        raise DataModelError("truncated command")
    n = data[0]
    return bytes(data[1:1 + n]).decode(), bytes(data[1 + n:])


@dataclass(frozen=True)
class Udf:
    name: str
    handler: Callable
    args: Schema
    result: Schema | None
    readonly: bool = False


@dataclass
class RequestContext:
    engine: "Engine"
    request_id: int
    client_id: int
    udf: str
    args: tuple
    ts_us: int = 0
    deadline: float | None = None
    txns: dict = field(default_factory=dict)
    readonly: bool = False

    def txn(self, store_id: int = 0) -> Txn:
        t = self.txns.get(store_id)
        if t is None:
            t = self.txns[store_id] = self.engine.stores[store_id].begin_txn()
        return t

    def store_for(self, key: bytes) -> tuple[Store, Txn | None]:
        sid = self.engine.shard_map(key)
        return self.engine.stores[sid], (None if self.readonly else self.txn(sid))

    def check_deadline(self) -> None:
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise DeadlineExceeded(f"request {self.request_id} passed its deadline")

    def spawn_subrequest(self, target, udf: str, args: Sequence[Any]) -> Awaitable:
        """Run ``udf`` on ``target`` (an :class:`Engine` for local calls or a
        :class:`RemoteTarget`) and return an awaitable of its result tuple."""
        return _subrequest(self, target, udf, tuple(args))


async def _subrequest(ctx: RequestContext, target, udf: str, args: tuple):
    if isinstance(target, RemoteTarget):
        spec = target.udfs.get(udf)
        if spec is None:
            raise UnknownUdfError(f"remote udf {udf!r} has no known schema")
        try:
            raw = await target.call(udf, encode_row(spec.args, args))
        except (OSError, TimeoutError) as e:
            raise Unreachable(f"remote engine unreachable: {e}") from e
        res = Result.from_bytes(raw)
        if not res.ok:
            raise ComputeError(f"remote {udf}: {res.status.name}", res.status)
        return decode_row(spec.result, res.payload) if spec.result is not None else ()
    engine: Engine = target
    spec = engine.udf(udf)
    child = RequestContext(engine, ctx.request_id, ctx.client_id, udf, args, ctx.ts_us, ctx.deadline,
                           readonly=ctx.readonly or spec.readonly)
    if engine is ctx.engine and not child.readonly:
        # same engine: the child sees the parent's pending writes and its own
        # are merged into the parent only if it succeeds
        child.txns = {sid: _ChildTxn(t) for sid, t in ctx.txns.items()}
        child.txn = lambda sid=0: child.txns.setdefault(sid, _ChildTxn(ctx.txn(sid)))  # type: ignore
    out = await engine._invoke(spec, child)
    if engine is ctx.engine and not child.readonly:
        for t in child.txns.values():
            t.merge()
    elif not child.readonly:
        for t in child.txns.values():
            t.commit()
    return out


class _ChildTxn:
    """Overlay over a parent transaction: reads fall through, writes stay
    local until :meth:`merge`."""

    def __init__(self, parent: Txn):
        self.parent = parent
        self.store = parent.store
        self.writes: dict[str, dict] = {}
        self.state = parent.state

    def _check_active(self):
        self.parent._check_active()

    def _buffer(self, table):
        return self.writes.setdefault(table, {})

    def merge(self):
        for table, buf in self.writes.items():
            self.parent._buffer(table).update(buf)

    def rollback(self):
        self.writes.clear()


class RemoteTarget:
    """A compute engine in another process; ``call(udf, args) -> result bytes``
    is an async transport (see :mod:`maxwellite.netproto`)."""

    def __init__(self, call: Callable[[str, bytes], Awaitable[bytes]], udfs: dict[str, Udf] | None = None):
        self.call = call
        self.udfs = udfs if udfs is not None else standard_udfs()


def hash_shard_map(n: int) -> Callable[[bytes], int]:
    if n == 1:
        return lambda key: 0
    return lambda key: zlib.crc32(key) % n


# --- txn-aware table access used by handlers ------------------------------------------------
def _get(store: Store, table: str, key: bytes, txn):
    if isinstance(txn, _ChildTxn):
        for layer in (txn.writes, txn.parent.writes):
            buf = layer.get(table)
            if buf is not None and key in buf:
                from .pagestore.store import TOMBSTONE
                v = buf[key]
                return None if v is TOMBSTONE else v
        return store.get(table, key)
    return store.get(table, key, txn=txn)


def _put(store: Store, table: str, key: bytes, row, txn):
    if txn is None:
        raise ComputeError("write attempted by a read-only request", Status.READ_ONLY)
    if isinstance(txn, _ChildTxn):
        encode_row(store.schemas()[table], row)  # validate now, like a direct write would at commit
        txn._buffer(table)[bytes(key)] = tuple(row)
        return
    store.upsert(table, key, row, txn=txn)


class Engine:
    """One compute engine over ``stores`` (usually one).

    ``apply(index, term, requests)`` is the replicated entry point; the async
    :meth:`execute_request` serves local and sub-request execution.
    """

    def __init__(self, stores: Store | Sequence[Store], shard_map: Callable[[bytes], int] | None = None,
                 accounts: bool = True, deadline: float = 1.0):
        self.stores = [stores] if isinstance(stores, Store) else list(stores)
        self.shard_map = shard_map or hash_shard_map(len(self.stores))
        self.deadline = deadline
        self.udfs: dict[str, Udf] = {}
        meta = self.stores[0]
        for name, schema in ((DEDUP, DEDUP_SCHEMA), (APPLIED, APPLIED_SCHEMA)):
            if not meta.has_table(name):
                meta.create_table(name, schema)
        row = meta.get(APPLIED, _APPLIED_KEY)
        self._applied = (row[0], row[1]) if row else (0, 0)
        if accounts:
            for s in self.stores:
                if not s.has_table(ACCOUNTS):
                    s.create_table(ACCOUNTS, ACCOUNT_SCHEMA)
            install_accounts(self)
        self.register_udf("echo", lambda ctx, payload: (payload,),
                          _S(("payload", ColumnType.BINARY)), _S(("payload", ColumnType.BINARY)),
                          readonly=True)

    # --- registry ------------------------------------------------------------------------
    def register_udf(self, name: str, handler: Callable, args: Schema, result: Schema | None,
                     readonly: bool = False) -> None:
        if name in self.udfs:
            raise DuplicateUdfError(f"udf {name!r} already registered")
        self.udfs[name] = Udf(name, handler, args, result, readonly)

    def udf(self, name: str) -> Udf:
        try:
            return self.udfs[name]
        except KeyError:
            raise UnknownUdfError(f"unknown udf {name!r}") from None

    # --- state -----------------------------------------------------------------------------
    @property
    def last_applied(self) -> int:
        return self._applied[0]

    @property
    def last_applied_term(self) -> int:
        return self._applied[1]

    def dump(self) -> dict:
        return {i: s.dump() for i, s in enumerate(self.stores)}

    # --- execution -------------------------------------------------------------------------
    async def _invoke(self, spec: Udf, ctx: RequestContext):
        ctx.check_deadline()
        out = spec.handler(ctx, *ctx.args)
        if inspect.isawaitable(out):
            out = await out
        ctx.check_deadline()
        return tuple(out) if out is not None else ()

    async def execute_request(self, ctx: RequestContext) -> Result:
        """Run one request in a transaction; commit on success, roll back on
        any handler error or deadline expiry."""
        try:
            spec = self.udf(ctx.udf)
        except UnknownUdfError as e:
            return Result(e.status, str(e).encode())
        ctx.readonly = ctx.readonly or spec.readonly
        if ctx.deadline is None and self.deadline:
            ctx.deadline = time.monotonic() + self.deadline
        try:
            out = await self._invoke(spec, ctx)
            payload = encode_row(spec.result, out) if spec.result is not None else b""
        except ComputeError as e:
            self._rollback(ctx)
            return Result(e.status, str(e).encode())
        except (DataModelError, StoreError) as e:
            self._rollback(ctx)
            return Result(Status.HANDLER_ERROR, str(e).encode())
        except Exception as e:  # handler bug: contained, rolled back
            self._rollback(ctx)
            return Result(Status.HANDLER_ERROR, f"{type(e).__name__}: {e}".encode())
        for t in ctx.txns.values():
            t.commit()
        ctx.txns.clear()
        return Result(Status.OK, payload)

    def _rollback(self, ctx: RequestContext) -> None:
        for t in ctx.txns.values():
            if getattr(t, "state", None) is not None and t.state.value == "active":
                t.rollback()
        ctx.txns.clear()

    def run_sync(self, ctx: RequestContext) -> Result:
        """Drive :meth:`execute_request` to completion without a loop; a handler
        that actually suspends is an error (replicated apply must not block)."""
        coro = self.execute_request(ctx)
        try:
            coro.send(None)
        except StopIteration as stop:
            return stop.value
        coro.close()
        self._rollback(ctx)
        return Result(Status.HANDLER_ERROR, b"handler suspended during replicated apply")

    def execute(self, udf: str, args: Sequence[Any] = (), client_id: int = 0, request_id: int = 0,
                ts_us: int = 0, readonly: bool = False) -> Result:
        """Convenience synchronous execution with already-decoded arguments."""
        ctx = RequestContext(self, request_id, client_id, udf, tuple(args), ts_us, readonly=readonly)
        ctx.deadline = None
        return self.run_sync(ctx)

    def _decode_ctx(self, client_id: int, request_id: int, command: bytes, ts_us: int,
                    readonly: bool) -> RequestContext | Result:
        try:
            udf, raw = decode_command(command)
            spec = self.udf(udf)
            args = decode_row(spec.args, raw)
        except UnknownUdfError as e:
            return Result(e.status, str(e).encode())
        except (DataModelError, UnicodeDecodeError) as e:
            return Result(Status.DECODE_ERROR, str(e).encode())
        if readonly and not spec.readonly:
            return Result(Status.READ_ONLY, f"udf {udf!r} writes; submit it instead".encode())
        return RequestContext(self, request_id, client_id, udf, args, ts_us, None, readonly=readonly)

    def read(self, command: bytes, client_id: int = 0, request_id: int = 0) -> Result:
        """Read-only request against the applied state (weak reads and the
        read entries of strong reads)."""
        ctx = self._decode_ctx(client_id, request_id, command, 0, True)
        return ctx if isinstance(ctx, Result) else self.run_sync(ctx)

    def apply_request(self, client_id: int, request_id: int, command: bytes, ts_us: int) -> Result:
        """Apply one replicated write with exactly-once effect per
        ``(client_id, request_id)``: a retried request returns the recorded
        outcome instead of executing again."""
        meta = self.stores[0]
        dkey = _U64.pack(client_id)
        if client_id:
            prev = meta.get(DEDUP, dkey)
            if prev is not None:
                if request_id == prev[0]:
                    return Result(Status(prev[1]), prev[2])
                if request_id < prev[0]:
                    return Result(Status.STALE_DUPLICATE, b"")
        ctx = self._decode_ctx(client_id, request_id, command, ts_us, False)
        res = ctx if isinstance(ctx, Result) else self.run_sync(ctx)
        if client_id:
            meta.upsert(DEDUP, dkey, (request_id, int(res.status), res.payload))
        return res

    def apply(self, index: int, term: int, requests, serve_reads: bool = True) -> list[Result | None]:
        """Apply one log entry. ``requests`` yields objects with ``client_id``,
        ``request_id``, ``command``, ``ts_us`` and ``read`` attributes. Read
        requests only need executing where someone waits for the answer
        (``serve_reads``); they never change state."""
        if index != self.last_applied + 1:
            raise StoreError(f"apply out of order: {index} after {self.last_applied}")
        out = []
        for r in requests:
            if r.read:
                out.append(self.read(r.command, r.client_id, r.request_id) if serve_reads else None)
            else:
                out.append(self.apply_request(r.client_id, r.request_id, r.command, r.ts_us))
        self.set_applied(index, term)
        return out

    def set_applied(self, index: int, term: int) -> None:
        self.stores[0].upsert(APPLIED, _APPLIED_KEY, (index, term))
        self._applied = (index, term)

    def flush(self) -> None:
        for s in self.stores:
            s.flush()

    # --- snapshots (single-store engines) ---------------------------------------------------
    def snapshot(self) -> bytes:
        """Byte image of the (flushed) database, for installing on a lagging replica."""
        s = self.stores[0]
        s.flush()
        return s.file.read_at(0, s.file.size())

    @classmethod
    def from_snapshot(cls, data: bytes, **kw) -> "Engine":
        mf = MemFile()
        mf.buf[:] = data
        return cls(Store.open(mf, StoreConfig(create_if_missing=False)), **kw)


# --- accounting application ----------------------------------------------------------------
ACCOUNT_ROW = _S(("balance", ColumnType.LONG), ("version", ColumnType.LONG),
                        ("updated_at", ColumnType.LONG))
_KEY = ("account", ColumnType.BINARY)
_AMOUNT = ("amount", ColumnType.LONG)


def _load(ctx: RequestContext, account: bytes):
    store, txn = ctx.store_for(account)
    row = _get(store, ACCOUNTS, account, txn)
    if row is None:
        raise UnknownAccount(f"unknown account {account!r}")
    return store, txn, list(row)


def _open(ctx, account, initial, overdraft):
    if initial < 0:
        raise ComputeError("negative opening balance")
    store, txn = ctx.store_for(account)
    if _get(store, ACCOUNTS, account, txn) is not None:
        raise ComputeError(f"account {account!r} exists")
    _put(store, ACCOUNTS, account, (initial, 0, ctx.ts_us, overdraft), txn)
    return (initial, 0, ctx.ts_us)


def _deposit(ctx, account, amount):
    if amount <= 0:
        raise ComputeError("amount must be positive")
    store, txn, row = _load(ctx, account)
    row[0] += amount
    row[1] += 1
    row[2] = ctx.ts_us
    _put(store, ACCOUNTS, account, row, txn)
    return tuple(row[:3])


def _withdraw(ctx, account, amount):
    if amount <= 0:
        raise ComputeError("amount must be positive")
    store, txn, row = _load(ctx, account)
    if row[0] < amount and not row[3]:
        raise InsufficientFunds(f"balance {row[0]} < {amount}")
    row[0] -= amount
    row[1] += 1
    row[2] = ctx.ts_us
    _put(store, ACCOUNTS, account, row, txn)
    return tuple(row[:3])


def _transfer(ctx, src, dst, amount):
    if amount <= 0:
        raise ComputeError("amount must be positive")
    if src == dst:
        raise ComputeError("transfer to self")
    s_store, s_txn, s = _load(ctx, src)
    d_store, d_txn, d = _load(ctx, dst)
    if s[0] < amount and not s[3]:
        raise InsufficientFunds(f"balance {s[0]} < {amount}")
    s[0] -= amount
    d[0] += amount
    s[1] += 1
    d[1] += 1
    s[2] = d[2] = ctx.ts_us
    _put(s_store, ACCOUNTS, src, s, s_txn)
    _put(d_store, ACCOUNTS, dst, d, d_txn)
    return (s[0], s[1], d[0], d[1])


def _query(ctx, account):
    _, _, row = _load(ctx, account)
    return tuple(row[:3])


def _open_range(ctx, start, count, initial):
    """Bulk open ``account_key(start..start+count)``; existing accounts are kept."""
    if initial < 0 or count < 0:
        raise ComputeError("negative opening balance or count")
    opened = 0
    for i in range(start, start + count):
        key = account_key(i)
        store, txn = ctx.store_for(key)
        if _get(store, ACCOUNTS, key, txn) is None:
            _put(store, ACCOUNTS, key, (initial, 0, ctx.ts_us, 0), txn)
            opened += 1
    return (opened,)


def _audit_range(ctx, start, count):
    """Sum, minimum and number of existing balances over an account range."""
    total, low, found = 0, 0, 0
    for i in range(start, start + count):
        key = account_key(i)
        store, txn = ctx.store_for(key)
        row = _get(store, ACCOUNTS, key, txn)
        if row is not None:
            low = row[0] if not found else min(low, row[0])
            total += row[0]
            found += 1
    return (total, low, found)


def install_accounts(engine: Engine) -> None:
    reg = engine.register_udf
    reg("open", _open, _S(_KEY, ("initial", ColumnType.LONG), ("overdraft", ColumnType.INTEGER)),
        ACCOUNT_ROW)
    reg("deposit", _deposit, _S(_KEY, _AMOUNT), ACCOUNT_ROW)
    reg("withdraw", _withdraw, _S(_KEY, _AMOUNT), ACCOUNT_ROW)
    reg("transfer", _transfer, _S(("src", ColumnType.BINARY), ("dst", ColumnType.BINARY), _AMOUNT),
        _S(("src_balance", ColumnType.LONG), ("src_version", ColumnType.LONG),
                  ("dst_balance", ColumnType.LONG), ("dst_version", ColumnType.LONG)))
    reg("query", _query, _S(_KEY), ACCOUNT_ROW, readonly=True)
    rng = _S(("start", ColumnType.LONG), ("count", ColumnType.LONG))
    reg("open_range", _open_range, _S(("start", ColumnType.LONG), ("count", ColumnType.LONG),
                                       ("initial", ColumnType.LONG)), _S(("opened", ColumnType.LONG)))
    reg("audit_range", _audit_range, rng, _S(("sum", ColumnType.LONG), ("min", ColumnType.LONG),
                                             ("count", ColumnType.LONG)), readonly=True)


def command(engine_or_udfs, udf: str, *args) -> bytes:
    """Encode a command for ``udf`` using the registry's argument schema."""
    udfs = engine_or_udfs.udfs if isinstance(engine_or_udfs, Engine) else engine_or_udfs
    return encode_command(udf, encode_row(udfs[udf].args, args))


def decode_result(engine_or_udfs, udf: str, res: Result) -> tuple:
    udfs = engine_or_udfs.udfs if isinstance(engine_or_udfs, Engine) else engine_or_udfs
    schema = udfs[udf].result
    return decode_row(schema, res.payload) if schema is not None else ()


_STANDARD: dict[str, Udf] = {}


def standard_udfs() -> dict[str, Udf]:
    """Schemas of the built-in UDFs, for clients that encode commands without an engine."""
    if not _STANDARD:
        _STANDARD.update(Engine(Store.open(None), accounts=True).udfs)
    return dict(_STANDARD)


def account_key(i: int) -> bytes:
    return b"acct:%06d" % i
