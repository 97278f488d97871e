"""Wire framing, message codecs and the client library.

Frame: ``u32 length (LE, payload bytes) | u16 type (LE) | payload``; payloads
above 16 MiB and unknown types are protocol errors that close the connection.
Every connection opens with a HELLO frame carrying the protocol version. See
``docs/wire.md`` for the full table.
"""
from __future__ import annotations

import enum
import itertools
import json
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

from .compute import Result, Status, Udf, decode_result, encode_command, standard_udfs
from .consensus.log import ClientRequest, RLogEntry, decode_batch, encode_batch
from .consensus.messages import (AppendEntries, AppendReply, InstallSnapshot, Probe, ProbeReply, RequestVote,
                                 VoteReply)
from .consensus.node import NoEligibleReplica, ProbeTable
from .datamodel import encode_row
from .runtime import current_loop, wait_readable, wait_writable

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct("<IH")
MAX_REDIRECTS = 8


class FrameType(enum.IntEnum):
    HELLO = 1
    APPEND_ENTRIES = 10
    APPEND_REPLY = 11
    REQUEST_VOTE = 12
    VOTE_REPLY = 13
    INSTALL_SNAPSHOT = 14
    PROBE = 15
    PROBE_REPLY = 16
    CLIENT_PROPOSE = 20
    CLIENT_READ_STRONG = 21
    CLIENT_READ_WEAK = 22
    RESPONSE = 23
    REDIRECT = 24
    META_REQUEST = 30
    META_REPLY = 31
    ERROR = 99


class Role(enum.IntEnum):
    CLIENT = 0
    PEER = 1
    AGENT = 2


class ProtocolError(Exception):
    pass


class Unreachable(ConnectionError):
    pass


class RetriesExhausted(Exception):
    def __init__(self, message: str, last: Result | None = None):
        super().__init__(message)
        self.last = last


# --- framing --------------------------------------------------------------------------------
def encode_frame(ftype: int, payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame payload of {len(payload)} bytes exceeds 16 MiB")
    return HEADER.pack(len(payload), ftype) + payload


class FrameDecoder:
    """Incremental decoder: feed bytes, pop complete frames."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> None:
        self.buf += data

    def next(self) -> tuple[FrameType, bytes] | None:
        buf = self.buf
        if len(buf) < HEADER.size:
            return None
        length, ftype = HEADER.unpack_from(buf, 0)
        if length > MAX_FRAME:
            raise ProtocolError(f"frame length {length} exceeds 16 MiB")
        try:
            ftype = FrameType(ftype)
        except ValueError:
            raise ProtocolError(f"unknown frame type {ftype}") from None
        end = HEADER.size + length
        if len(buf) < end:
            return None
        payload = bytes(buf[HEADER.size:end])
        del buf[:end]
        return ftype, payload


def decode_frames(data: bytes) -> list[tuple[FrameType, bytes]]:
    dec = FrameDecoder()
    dec.feed(data)
    out = []
    while (f := dec.next()) is not None:
        out.append(f)
    if dec.buf:
        raise ProtocolError("truncated frame")
    return out


# --- payload codecs ---------------------------------------------------------------------------
_HELLO = struct.Struct("<HBq")
_AE = struct.Struct("<QQQQQQI")
_ENTRY = struct.Struct("<QQI")
_AR = struct.Struct("<QQQBQQ")
_RV = struct.Struct("<QQQQQ")
_VR = struct.Struct("<QQQB")
_IS = struct.Struct("<QQQQQ")
_PROBE = struct.Struct("<QQQQ")
_PROBE_REPLY = struct.Struct("<QQQQQB")
_CLIENT = struct.Struct("<QQB")
_RESPONSE = struct.Struct("<QB")
_REDIRECT = struct.Struct("<QqH")


@dataclass(frozen=True)
class Hello:
    version: int
    role: Role
    node_id: int


@dataclass(frozen=True)
class ClientCall:
    kind: FrameType
    request_id: int
    client_id: int
    udf: str
    args: bytes


@dataclass(frozen=True)
class Response:
    request_id: int
    result: Result


@dataclass(frozen=True)
class Redirect:
    request_id: int
    leader_id: int | None
    host: str
    port: int


def encode_message(msg) -> tuple[FrameType, bytes]:
    if isinstance(msg, Hello):
        return FrameType.HELLO, _HELLO.pack(msg.version, msg.role, msg.node_id)
    if isinstance(msg, AppendEntries):
        parts = [_AE.pack(msg.src, msg.dst, msg.term, msg.prev_index, msg.prev_term, msg.leader_commit,
                          len(msg.entries))]
        for e in msg.entries:
            body = encode_batch(e.batch)
            parts.append(_ENTRY.pack(e.term, e.index, len(body)))
            parts.append(body)
        return FrameType.APPEND_ENTRIES, b"".join(parts)
    if isinstance(msg, AppendReply):
        return FrameType.APPEND_REPLY, _AR.pack(msg.src, msg.dst, msg.term, msg.success, msg.match_index,
                                                msg.conflict_index)
    if isinstance(msg, RequestVote):
        return FrameType.REQUEST_VOTE, _RV.pack(msg.src, msg.dst, msg.term, msg.last_index, msg.last_term)
    if isinstance(msg, VoteReply):
        return FrameType.VOTE_REPLY, _VR.pack(msg.src, msg.dst, msg.term, msg.granted)
    if isinstance(msg, InstallSnapshot):
        return FrameType.INSTALL_SNAPSHOT, _IS.pack(msg.src, msg.dst, msg.term, msg.last_index,
                                                    msg.last_term) + msg.data
    if isinstance(msg, Probe):
        return FrameType.PROBE, _PROBE.pack(msg.src, msg.dst, msg.seq, msg.sent_us)
    if isinstance(msg, ProbeReply):
        return FrameType.PROBE_REPLY, _PROBE_REPLY.pack(msg.src, msg.dst, msg.seq, msg.sent_us,
                                                        msg.applied_index, msg.is_leader)
    if isinstance(msg, ClientCall):
        name = msg.udf.encode()
        if len(name) > 255:
            raise ProtocolError("udf name too long")
        return msg.kind, _CLIENT.pack(msg.request_id, msg.client_id, len(name)) + name + msg.args
    if isinstance(msg, Response):
        return FrameType.RESPONSE, _RESPONSE.pack(msg.request_id, msg.result.status) + msg.result.payload
    if isinstance(msg, Redirect):
        host = msg.host.encode()
        lid = -1 if msg.leader_id is None else msg.leader_id
        return FrameType.REDIRECT, _REDIRECT.pack(msg.request_id, lid, msg.port) + bytes([len(host)]) + host
    raise ProtocolError(f"no encoding for {type(msg).__name__}")


def _need(payload: bytes, n: int, what: str) -> None:
    if len(payload) < n:
        raise ProtocolError(f"truncated {what} frame")


def _exact(payload: bytes, s: struct.Struct, what: str) -> tuple:
    if len(payload) != s.size:
        raise ProtocolError(f"{what} frame has {len(payload)} bytes, expected {s.size}")
    return s.unpack(payload)


def decode_message(ftype: FrameType, payload: bytes):
    try:
        return _decode(ftype, payload)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, ProtocolError):
            raise
        raise ProtocolError(f"malformed {FrameType(ftype).name} frame: {e}") from e


def _decode(ftype: FrameType, payload: bytes):
    if ftype is FrameType.HELLO:
        v, role, nid = _exact(payload, _HELLO, "hello")
        return Hello(v, Role(role), nid)
    if ftype is FrameType.APPEND_ENTRIES:
        _need(payload, _AE.size, "append")
        src, dst, term, prev, prev_term, commit, n = _AE.unpack_from(payload, 0)
        pos, entries = _AE.size, []
        for _ in range(n):
            _need(payload, pos + _ENTRY.size, "append entry")
            t, idx, ln = _ENTRY.unpack_from(payload, pos)
            pos += _ENTRY.size
            _need(payload, pos + ln, "append entry body")
            entries.append(RLogEntry(t, idx, decode_batch(payload[pos:pos + ln])))
            pos += ln
        if pos != len(payload):
            raise ProtocolError("trailing bytes in append frame")
        return AppendEntries(src, dst, term, prev, prev_term, tuple(entries), commit)
    if ftype is FrameType.APPEND_REPLY:
        src, dst, term, ok, match, conflict = _exact(payload, _AR, "append reply")
        return AppendReply(src, dst, term, bool(ok), match, conflict)
    if ftype is FrameType.REQUEST_VOTE:
        return RequestVote(*_exact(payload, _RV, "vote request"))
    if ftype is FrameType.VOTE_REPLY:
        src, dst, term, granted = _exact(payload, _VR, "vote reply")
        return VoteReply(src, dst, term, bool(granted))
    if ftype is FrameType.INSTALL_SNAPSHOT:
        _need(payload, _IS.size, "snapshot")
        return InstallSnapshot(*_IS.unpack_from(payload, 0), bytes(payload[_IS.size:]))
    if ftype is FrameType.PROBE:
        return Probe(*_exact(payload, _PROBE, "probe"))
    if ftype is FrameType.PROBE_REPLY:
        src, dst, seq, sent, applied, leader = _exact(payload, _PROBE_REPLY, "probe reply")
        return ProbeReply(src, dst, seq, sent, applied, bool(leader))
    if ftype in (FrameType.CLIENT_PROPOSE, FrameType.CLIENT_READ_STRONG, FrameType.CLIENT_READ_WEAK):
        _need(payload, _CLIENT.size, "client")
        rid, cid, n = _CLIENT.unpack_from(payload, 0)
        _need(payload, _CLIENT.size + n, "client")
        udf = bytes(payload[_CLIENT.size:_CLIENT.size + n]).decode()
        return ClientCall(ftype, rid, cid, udf, bytes(payload[_CLIENT.size + n:]))
    if ftype is FrameType.RESPONSE:
        _need(payload, _RESPONSE.size, "response")
        rid, status = _RESPONSE.unpack_from(payload, 0)
        return Response(rid, Result(Status(status), bytes(payload[_RESPONSE.size:])))
    if ftype is FrameType.REDIRECT:
        _need(payload, _REDIRECT.size + 1, "redirect")
        rid, lid, port = _REDIRECT.unpack_from(payload, 0)
        n = payload[_REDIRECT.size]
        host = bytes(payload[_REDIRECT.size + 1:_REDIRECT.size + 1 + n])
        if len(host) != n:
            raise ProtocolError("truncated redirect host")
        return Redirect(rid, None if lid < 0 else lid, host.decode(), port)
    if ftype in (FrameType.META_REQUEST, FrameType.META_REPLY, FrameType.ERROR):
        return json.loads(payload.decode()) if payload else {}
    raise ProtocolError(f"unexpected frame type {ftype}")


def message_frame(msg) -> bytes:
    return encode_frame(*encode_message(msg))


def json_frame(ftype: FrameType, body: dict) -> bytes:
    return encode_frame(ftype, json.dumps(body, separators=(",", ":")).encode())


# --- async connection on the runtime loop ----------------------------------------------------------
class AsyncConn:
    """Non-blocking framed socket driven by the runtime loop. ``send`` never
    blocks the caller: what the kernel does not take is flushed by a task."""

    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        self.sock = sock
        self.decoder = FrameDecoder()
        self.out = bytearray()
        self.closed = False
        self._writer = None

    def send_bytes(self, data: bytes) -> None:
        if self.closed:
            return
        if not self.out:
            try:
                n = self.sock.send(data)
            except BlockingIOError:
                n = 0
            except OSError:
                self.close()
                return
            data = data[n:]
            if not data:
                return
        self.out += data
        if self._writer is None:
            self._writer = current_loop().spawn(self._flush(), name="conn-writer")

    def send(self, msg) -> None:
        self.send_bytes(message_frame(msg))

    async def _flush(self) -> None:
        try:
            while self.out and not self.closed:
                await wait_writable(self.sock)
                try:
                    n = self.sock.send(self.out)
                except BlockingIOError:
                    continue
                except OSError:
                    self.close()
                    return
                del self.out[:n]
        finally:
            self._writer = None

    async def recv(self) -> tuple[FrameType, bytes]:
        while True:
            f = self.decoder.next()
            if f is not None:
                return f
            if self.closed:
                raise ConnectionError("connection closed")
            await wait_readable(self.sock)
            try:
                data = self.sock.recv(1 << 16)
            except BlockingIOError:
                continue
            except OSError as e:
                self.close()
                raise ConnectionError(str(e)) from e
            if not data:
                self.close()
                raise ConnectionError("peer closed the connection")
            self.decoder.feed(data)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            current_loop().forget_fd(self.sock)
        except Exception:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


async def async_connect(host: str, port: int, timeout: float = 1.0) -> AsyncConn:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setblocking(False)
    err = sock.connect_ex((host, port))
    if err not in (0, 115, 36, 10035):  # EINPROGRESS variants
        sock.close()
        raise ConnectionRefusedError(err, f"connect to {host}:{port} failed")
    loop = current_loop()
    fut_deadline = loop.time() + timeout
    await wait_writable(sock)
    err = sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
    if err or loop.time() > fut_deadline:
        current_loop().forget_fd(sock)
        sock.close()
        raise ConnectionRefusedError(err, f"connect to {host}:{port} failed")
    return AsyncConn(sock)


# --- blocking connection (clients, tools) ------------------------------------------------------------
class BlockingConn:
    def __init__(self, host: str, port: int, timeout: float = 2.0, role: Role = Role.CLIENT, node_id: int = 0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise Unreachable(f"{host}:{port}: {e}") from e
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.decoder = FrameDecoder()
        self.addr = (host, port)
        self.send(Hello(PROTOCOL_VERSION, role, node_id))
        ftype, payload = self.recv()
        if ftype is not FrameType.HELLO:
            raise ProtocolError("server did not answer the handshake")
        hello = decode_message(ftype, payload)
        if hello.version != PROTOCOL_VERSION:
            raise ProtocolError(f"server speaks protocol {hello.version}, we speak {PROTOCOL_VERSION}")
        self.server_id = hello.node_id

    def send(self, msg) -> None:
        self.send_raw(message_frame(msg))

    def send_raw(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise Unreachable(f"{self.addr}: {e}") from e

    def recv(self, timeout: float | None = None) -> tuple[FrameType, bytes]:
        if timeout is not None:
            self.sock.settimeout(timeout)
        while True:
            f = self.decoder.next()
            if f is not None:
                return f
            try:
                data = self.sock.recv(1 << 16)
            except socket.timeout as e:
                raise TimeoutError(f"{self.addr}: no reply") from e
            except OSError as e:
                raise Unreachable(f"{self.addr}: {e}") from e
            if not data:
                raise Unreachable(f"{self.addr}: connection closed")
            self.decoder.feed(data)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected host:port")
    return host, int(port)


def meta_call(meta_addr: str, op: str, timeout: float = 2.0, **body) -> dict:
    """One request/reply exchange with a MetaServer."""
    host, port = parse_addr(meta_addr)
    conn = BlockingConn(host, port, timeout=timeout)
    try:
        conn.send_raw(json_frame(FrameType.META_REQUEST, {"op": op, **body}))
        ftype, payload = conn.recv(timeout)
    finally:
        conn.close()
    reply = decode_message(ftype, payload)
    if ftype is FrameType.ERROR or not reply.get("ok", False):
        raise MetaError(reply.get("error", "meta request failed"), reply.get("kind", ""))
    return reply


class MetaError(Exception):
    def __init__(self, message: str, kind: str = ""):
        super().__init__(message)
        self.kind = kind


# --- client library -----------------------------------------------------------------------------------
@dataclass
class ReplicaAddr:
    replica_id: int
    host: str
    port: int
    status: str = "Unknown"


@dataclass
class ClientHandle:
    """Single-owner client of one cluster: leader tracking, redirects with
    bounded retries, and weak reads routed by a probe table."""

    meta_addr: str | None
    cluster: str
    replicas: dict[int, ReplicaAddr]
    client_id: int
    udfs: dict[str, Udf]
    timeout: float = 2.0
    attempts: int = 5
    backoff: float = 0.010
    probe_interval: float = 0.1
    leader_hint: int | None = None
    routing_log: list[int] = field(default_factory=list)
    table: ProbeTable | None = None

    def __post_init__(self):
        self._conns: dict[int, BlockingConn] = {}
        self._rids = itertools.count(1)
        self._prober: threading.Thread | None = None
        self._stop = threading.Event()
        self.table = ProbeTable(list(self.replicas), interval=self.probe_interval)

    # --- connection management ---------------------------------------------------------
    def _conn(self, rid: int) -> BlockingConn:
        c = self._conns.get(rid)
        if c is None:
            r = self.replicas[rid]
            c = self._conns[rid] = BlockingConn(r.host, r.port, timeout=self.timeout, node_id=self.client_id)
        return c

    def _drop(self, rid: int) -> None:
        c = self._conns.pop(rid, None)
        if c is not None:
            c.close()

    def refresh(self) -> None:
        if self.meta_addr is None:
            return
        info = meta_call(self.meta_addr, "discover", name=self.cluster, timeout=self.timeout)
        self.replicas = {r["replica_id"]: ReplicaAddr(r["replica_id"], r["host"], r["port"], r["status"])
                         for r in info["cluster"]["replicas"]}

    def close(self) -> None:
        self._stop.set()
        if self._prober is not None:
            self._prober.join(timeout=2)
        for rid in list(self._conns):
            self._drop(rid)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- requests ----------------------------------------------------------------------
    def _encode(self, udf: str, args: Sequence[Any]) -> bytes:
        spec = self.udfs.get(udf)
        if spec is None:
            raise ValueError(f"unknown udf {udf!r}")
        return encode_row(spec.args, tuple(args))

    def _exchange(self, rid: int, call: ClientCall, timeout: float) -> Any:
        conn = self._conn(rid)
        conn.send(call)
        while True:
            ftype, payload = conn.recv(timeout)
            msg = decode_message(ftype, payload)
            if isinstance(msg, (Response, Redirect)) and msg.request_id == call.request_id:
                return msg

    def _call(self, kind: FrameType, udf: str, args: Sequence[Any], target: int | None = None) -> Result:
        """Send one request until a definite answer. Failed attempts (transport
        errors, leaderless redirects, NOT_LEADER/SHUTDOWN replies) are bounded
        by ``attempts`` with doubling backoff; following a redirect that names
        a leader is not a failed attempt. The request id never changes, so a
        retry that reaches the log twice is deduplicated at apply time."""
        call = ClientCall(kind, next(self._rids), self.client_id, udf, self._encode(udf, args))
        delay = self.backoff
        last: Result | None = None
        refreshed = False
        failures = hops = 0

        def fail():
            nonlocal failures, delay, refreshed
            failures += 1
            if not refreshed:
                refreshed = True
                try:
                    self.refresh()
                except (MetaError, Unreachable, ProtocolError, OSError):
                    pass
            if failures < self.attempts:
                time.sleep(delay)
                delay *= 2

        while failures < self.attempts:
            rid = target if target is not None else self._pick_leader()
            try:
                msg = self._exchange(rid, call, self.timeout)
            except (Unreachable, TimeoutError, ConnectionError, ProtocolError) as e:
                log.debug("request %s to replica %s failed: %s", call.request_id, rid, e)
                self._drop(rid)
                if rid == self.leader_hint:
                    self.leader_hint = None
                last = None
                fail()
                continue
            if isinstance(msg, Redirect):
                last = Result(Status.NOT_LEADER, b"")
                if target is not None:
                    return last
                if msg.leader_id in self.replicas and msg.leader_id != rid and hops < MAX_REDIRECTS:
                    self.leader_hint = msg.leader_id
                    hops += 1
                    continue
                self.leader_hint = None
                fail()
                continue
            res = msg.result
            if res.status in (Status.NOT_LEADER, Status.SHUTDOWN) and target is None:
                last = res
                self.leader_hint = None
                fail()
                continue
            if kind is not FrameType.CLIENT_READ_WEAK:
                self.leader_hint = rid
            return res
        raise RetriesExhausted(f"{udf}: no definite answer after {self.attempts} attempts", last)

    def _pick_leader(self) -> int:
        if self.leader_hint in self.replicas:
            return self.leader_hint
        up = [r for r in self.replicas.values() if r.status != "Down"] or list(self.replicas.values())
        return random.choice(up).replica_id

    def submit(self, udf: str, args: Sequence[Any] = ()) -> Result:
        """Replicated write, routed to the leader."""
        return self._call(FrameType.CLIENT_PROPOSE, udf, args)

    def query(self, udf: str, args: Sequence[Any] = (), mode: str = "strong") -> Result:
        if mode == "strong":
            return self._call(FrameType.CLIENT_READ_STRONG, udf, args)
        if mode != "weak":
            raise ValueError("mode must be 'strong' or 'weak'")
        try:
            rid = self.table.choose(time.monotonic())
        except NoEligibleReplica:
            self.probe_once()
            rid = self.table.choose(time.monotonic())
        self.routing_log.append(rid)
        try:
            return self._call(FrameType.CLIENT_READ_WEAK, udf, args, target=rid)
        except RetriesExhausted:
            self.table.record_timeout(rid)
            raise

    def decode(self, udf: str, res: Result) -> tuple:
        return decode_result(self.udfs, udf, res)

    # --- probing -----------------------------------------------------------------------
    def probe_once(self, timeout: float = 0.5) -> ProbeTable:
        """One ping per replica over dedicated sockets; EWMA RTT in ms."""
        for rid, r in list(self.replicas.items()):
            try:
                rtt = _ping(r, self.client_id, timeout)
            except (Unreachable, TimeoutError, ProtocolError, OSError):
                rtt = None
            if rtt is None:
                self.table.record_timeout(rid)
            else:
                self.table.record(rid, rtt, time.monotonic())
        return self.table

    def start_probing(self) -> None:
        if self._prober is not None:
            return

        def run():
            conns: dict[int, BlockingConn] = {}
            seq = itertools.count(1)
            while not self._stop.is_set():
                for rid, r in list(self.replicas.items()):
                    try:
                        c = conns.get(rid) or conns.setdefault(rid, BlockingConn(r.host, r.port, 0.5,
                                                                                 node_id=self.client_id))
                        rtt = _ping_on(c, self.client_id, rid, next(seq), 0.5)
                        self.table.record(rid, rtt, time.monotonic())
                    except (Unreachable, TimeoutError, ProtocolError, OSError):
                        self.table.record_timeout(rid)
                        old = conns.pop(rid, None)
                        if old is not None:
                            old.close()
                self._stop.wait(self.probe_interval)
            for c in conns.values():
                c.close()

        self._prober = threading.Thread(target=run, name=f"probe-{self.client_id}", daemon=True)
        self._prober.start()


def _ping_on(conn: BlockingConn, client_id: int, rid: int, seq: int, timeout: float) -> float:
    t0 = time.perf_counter()
    conn.send(Probe(client_id, rid, seq, int(t0 * 1e6)))
    while True:
        ftype, payload = conn.recv(timeout)
        msg = decode_message(ftype, payload)
        if isinstance(msg, ProbeReply) and msg.seq == seq:
            return (time.perf_counter() - t0) * 1000.0


def _ping(r: ReplicaAddr, client_id: int, timeout: float) -> float:
    conn = BlockingConn(r.host, r.port, timeout=timeout, node_id=client_id)
    try:
        return _ping_on(conn, client_id, r.replica_id, 1, timeout)
    finally:
        conn.close()


def connect(meta_addr: str, cluster: str, client_id: int | None = None, probe: bool = True,
            udfs: dict[str, Udf] | None = None, timeout: float = 2.0, **kw) -> ClientHandle:
    """Discover ``cluster`` through the MetaServer and return a handle."""
    info = meta_call(meta_addr, "discover", name=cluster, timeout=timeout)
    replicas = {r["replica_id"]: ReplicaAddr(r["replica_id"], r["host"], r["port"], r["status"])
                for r in info["cluster"]["replicas"]}
    h = ClientHandle(meta_addr, cluster, replicas, client_id or random.getrandbits(62) + 1,
                     udfs or standard_udfs(), timeout=timeout, **kw)
    if probe:
        h.start_probing()
    return h


def connect_direct(replicas: dict[int, tuple[str, int]], client_id: int | None = None,
                   udfs: dict[str, Udf] | None = None, **kw) -> ClientHandle:
    """Handle for a cluster whose addresses are already known (no MetaServer)."""
    reps = {rid: ReplicaAddr(rid, h, p) for rid, (h, p) in replicas.items()}
    return ClientHandle(None, "", reps, client_id or random.getrandbits(62) + 1, udfs or standard_udfs(), **kw)


# --- server-side helpers ----------------------------------------------------------------------------
async def server_handshake(conn: AsyncConn, node_id: int) -> Hello:
    """Expect HELLO first; answer with ours. Version mismatch closes the connection."""
    ftype, payload = await conn.recv()
    if ftype is not FrameType.HELLO:
        conn.close()
        raise ProtocolError(f"expected HELLO, got {ftype.name}")
    hello = decode_message(ftype, payload)
    if hello.version != PROTOCOL_VERSION:
        conn.send_bytes(json_frame(FrameType.ERROR, {"error": f"unsupported protocol version {hello.version}",
                                                     "kind": "version"}))
        conn.close()
        raise ProtocolError(f"peer speaks protocol {hello.version}")
    conn.send(Hello(PROTOCOL_VERSION, Role.PEER, node_id))
    return hello


def listen_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(128)
    sock.setblocking(False)
    return sock


async def accept_loop(sock: socket.socket, on_conn) -> None:
    """Accept forever, spawning ``on_conn(AsyncConn)`` per connection."""
    loop = current_loop()
    while True:
        await wait_readable(sock)
        try:
            s, _ = sock.accept()
        except (BlockingIOError, InterruptedError):
            continue
        except OSError as e:
            log.warning("accept failed: %s", e)
            return
        loop.spawn(on_conn(AsyncConn(s)), name="conn")
