"""TCP replica server: one runtime loop drives the Raft node, peer links,
client connections and the MetaServer heartbeat agent.

Config is a flat ``key = value`` file, e.g.::

    cluster = bank
    replicas = 1@127.0.0.1:7001,2@127.0.0.1:7002,3@127.0.0.1:7003
    data_dir = /var/lib/maxwellite/r1
    meta = 127.0.0.1:7000
    runtime.max_tasks = 100000
    runtime.io_backend = portable
    runtime.deterministic_seed = 7
"""
from __future__ import annotations

import configparser
import logging
import os
import random
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field

from .compute import Engine, Result, Status, encode_command
from .consensus.log import ClientRequest, RaftLog
from .consensus.messages import PEER_MESSAGES, Probe, ProbeReply
from .consensus.node import NotLeader, RaftConfig, RaftNode, Role as RaftRole, ShutdownError
from .netproto import (AsyncConn, ClientCall, FrameType, Hello, PROTOCOL_VERSION, ProtocolError, Redirect,
                       Response, Role, accept_loop, async_connect, decode_message, json_frame, listen_socket,
                       message_frame, parse_addr, server_handshake)
from .pagestore import Store
from .runtime import Loop, sleep

log = logging.getLogger(__name__)

MAX_PEER_BACKLOG = 64 * 1024 * 1024
LEADERLESS_WAIT = 1.0  # seconds a request may wait for an election


# --- configuration ---------------------------------------------------------------------------------
@dataclass
class ServerConfig:
    replica_id: int
    replicas: dict[int, tuple[str, int]]
    data_dir: str
    cluster: str = "default"
    meta: str | None = None
    heartbeat_interval: float = 2.0
    max_tasks: int = 100_000
    io_backend: str = "portable"
    deterministic_seed: int | None = None
    raft: RaftConfig = field(default_factory=lambda: RaftConfig(checkpoint_every=1000, checkpoint_keep=100))
    cache_pages: int = 4096
    inject_delay_ms: float = 0.0

    @property
    def addr(self) -> tuple[str, int]:
        return self.replicas[self.replica_id]


def parse_replicas(text: str) -> dict[int, tuple[str, int]]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        rid, _, addr = item.partition("@")
        out[int(rid)] = parse_addr(addr)
    return out


def format_replicas(replicas: dict[int, tuple[str, int]]) -> str:
    return ",".join(f"{rid}@{h}:{p}" for rid, (h, p) in sorted(replicas.items()))


def load_config(path: str, replica_id: int | None = None) -> ServerConfig:
    cp = configparser.ConfigParser(interpolation=None)
    with open(path) as f:
        cp.read_string("[root]\n" + f.read())
    c = cp["root"]
    rid = replica_id if replica_id is not None else c.getint("replica_id")
    if rid is None:
        raise ValueError("replica id missing: pass --replica-id or set replica_id")
    replicas = parse_replicas(c.get("replicas", ""))
    if rid not in replicas:
        raise ValueError(f"replica {rid} is not listed in replicas")
    data_dir = c.get("data_dir", f"./data-{rid}").replace("{id}", str(rid))
    seed = c.get("runtime.deterministic_seed", "").strip()
    raft = RaftConfig(
        election_timeout=(c.getfloat("raft.election_timeout_min", 0.15), c.getfloat("raft.election_timeout_max", 0.30)),
        heartbeat=c.getfloat("raft.heartbeat", 0.05),
        max_entries=c.getint("raft.max_entries", 64),
        max_bytes=c.getint("raft.max_bytes", 256 * 1024),
        max_delay=c.getfloat("raft.max_delay_ms", 1.0) / 1000.0,
        checkpoint_every=c.getint("raft.checkpoint_every", 1000),
        checkpoint_keep=c.getint("raft.checkpoint_keep", 100),
    )
    return ServerConfig(
        replica_id=rid, replicas=replicas, data_dir=data_dir, cluster=c.get("cluster", "default"),
        meta=c.get("meta") or None, heartbeat_interval=c.getfloat("heartbeat_interval", 2.0),
        max_tasks=c.getint("runtime.max_tasks", 100_000), io_backend=c.get("runtime.io_backend", "portable"),
        deterministic_seed=int(seed) if seed else None, raft=raft,
        cache_pages=c.getint("storage.cache_pages", 4096), inject_delay_ms=c.getfloat("net.inject_delay_ms", 0.0))


def write_config(path: str, cfg: ServerConfig) -> None:
    r = cfg.raft
    lines = [
        f"cluster = {cfg.cluster}",
        f"replicas = {format_replicas(cfg.replicas)}",
        f"data_dir = {cfg.data_dir}",
        f"heartbeat_interval = {cfg.heartbeat_interval}",
        f"runtime.max_tasks = {cfg.max_tasks}",
        f"runtime.io_backend = {cfg.io_backend}",
        f"runtime.deterministic_seed = {'' if cfg.deterministic_seed is None else cfg.deterministic_seed}",
        f"raft.election_timeout_min = {r.election_timeout[0]}",
        f"raft.election_timeout_max = {r.election_timeout[1]}",
        f"raft.heartbeat = {r.heartbeat}",
        f"raft.max_entries = {r.max_entries}",
        f"raft.max_bytes = {r.max_bytes}",
        f"raft.max_delay_ms = {r.max_delay * 1000.0}",
        f"raft.checkpoint_every = {r.checkpoint_every}",
        f"raft.checkpoint_keep = {r.checkpoint_keep}",
        f"storage.cache_pages = {cfg.cache_pages}",
        f"net.inject_delay_ms = {cfg.inject_delay_ms}",
    ]
    if cfg.meta:
        lines.append(f"meta = {cfg.meta}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# --- the replica ----------------------------------------------------------------------------------------
class PeerLink:
    """Outbound connection to one peer, re-established forever. Messages sent
    while it is down are dropped; the consensus layer retransmits."""

    def __init__(self, server: "ReplicaServer", peer: int):
        self.server = server
        self.peer = peer
        self.conn: AsyncConn | None = None
        self.dropped = 0

    def send(self, msg) -> None:
        c = self.conn
        if c is None or c.closed or len(c.out) > MAX_PEER_BACKLOG:
            self.dropped += 1
            return
        c.send_bytes(message_frame(msg))

    async def run(self) -> None:
        host, port = self.server.cfg.replicas[self.peer]
        backoff = 0.05
        while self.server.running:
            conn = None
            try:
                conn = await async_connect(host, port)
                conn.send(Hello(PROTOCOL_VERSION, Role.PEER, self.server.id))
                ftype, payload = await conn.recv()
                if ftype is not FrameType.HELLO or decode_message(ftype, payload).version != PROTOCOL_VERSION:
                    raise ProtocolError("peer rejected the handshake")
                self.conn = conn
                backoff = 0.05
                log.info("replica %s: link to %s up", self.server.id, self.peer)
                while True:  # peers never talk back on this socket; recv detects closure
                    await conn.recv()
            except (OSError, ConnectionError, ProtocolError) as e:
                log.debug("replica %s: link to %s down: %s", self.server.id, self.peer, e)
            if conn is not None:
                conn.close()
            self.conn = None
            await sleep(backoff * (1 + random.random()))
            backoff = min(backoff * 2, 0.5)


class ReplicaServer:
    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.id = cfg.replica_id
        self.loop = Loop(max_tasks=cfg.max_tasks, io_backend=cfg.io_backend)
        # the seed pins election-timeout randomization; network timing stays real
        seed = cfg.deterministic_seed
        self.rng = random.Random(None if seed is None else seed * 1_000_003 + self.id)
        os.makedirs(cfg.data_dir, exist_ok=True)
        self.log_path = os.path.join(cfg.data_dir, "raft.db")
        self.state_path = os.path.join(cfg.data_dir, "state.db")
        self.running = False
        self.node: RaftNode | None = None
        self.links: dict[int, PeerLink] = {}
        self.sock = listen_socket(*cfg.addr)
        self.meta_status = None
        self.client_conns = 0

    # --- setup -------------------------------------------------------------------------
    def _open_engine(self) -> Engine:
        return Engine(Store.open(self.state_path, cache_capacity_pages=self.cfg.cache_pages))

    def _restore(self, data: bytes) -> Engine:
        self.node.engine.stores[0].abandon()
        tmp = self.state_path + ".snap"
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.state_path)
        return self._open_engine()

    def _start(self) -> None:
        cfg = self.cfg
        raft_log = RaftLog(Store.open(self.log_path, cache_capacity_pages=cfg.cache_pages), durable=True)
        self.node = RaftNode(self.id, list(cfg.replicas), raft_log, self._open_engine(), self.loop, self._send,
                             cfg.raft, rng=self.rng, restore=self._restore,
                             clock_us=lambda: int(time.time() * 1e6))
        self.running = True
        self.node.start()
        for p in self.node.peers:
            link = self.links[p] = PeerLink(self, p)
            self.loop.spawn(link.run(), name=f"link-{p}")
        self.loop.spawn(accept_loop(self.sock, self._serve_conn), name="accept")
        if cfg.meta:
            self.loop.spawn(self._agent(), name="meta-agent")

    def _send(self, msg) -> None:
        link = self.links.get(msg.dst)
        if link is not None:
            link.send(msg)

    # --- inbound connections -----------------------------------------------------------------
    async def _serve_conn(self, conn: AsyncConn) -> None:
        try:
            hello = await server_handshake(conn, self.id)
            if hello.role is Role.PEER:
                await self._serve_peer(conn)
            else:
                self.client_conns += 1
                try:
                    await self._serve_client(conn)
                finally:
                    self.client_conns -= 1
        except (ConnectionError, ProtocolError, OSError) as e:
            log.debug("replica %s: connection closed: %s", self.id, e)
        finally:
            conn.close()

    async def _serve_peer(self, conn: AsyncConn) -> None:
        while True:
            ftype, payload = await conn.recv()
            msg = decode_message(ftype, payload)
            if not isinstance(msg, PEER_MESSAGES):
                raise ProtocolError(f"peer sent {ftype.name}")
            self.node.receive(msg)

    def _reply(self, conn: AsyncConn, msg) -> None:
        data = message_frame(msg)
        delay = self.cfg.inject_delay_ms / 1000.0
        if delay > 0:
            self.loop.call_later(delay, conn.send_bytes, data)
        else:
            conn.send_bytes(data)

    def _redirect(self, conn: AsyncConn, request_id: int, hint: int | None) -> None:
        host, port = self.cfg.replicas.get(hint, ("", 0))
        self._reply(conn, Redirect(request_id, hint, host, port))

    async def _serve_client(self, conn: AsyncConn) -> None:
        node = self.node
        while True:
            ftype, payload = await conn.recv()
            msg = decode_message(ftype, payload)
            if isinstance(msg, Probe):
                self._reply(conn, ProbeReply(self.id, msg.src, msg.seq, msg.sent_us, node.last_applied,
                                             node.role is RaftRole.LEADER))
                continue
            if not isinstance(msg, ClientCall):
                raise ProtocolError(f"client sent {ftype.name}")
            try:
                cmd = encode_command(msg.udf, msg.args)
            except (ValueError, UnicodeError):
                self._reply(conn, Response(msg.request_id, Result(Status.DECODE_ERROR, b"bad udf name")))
                continue
            if ftype is FrameType.CLIENT_READ_WEAK:
                try:
                    res = node.weak_read(cmd)
                except ShutdownError:
                    res = Result(Status.SHUTDOWN, b"")
                self._reply(conn, Response(msg.request_id, res))
                continue
            req = ClientRequest(msg.client_id, msg.request_id, cmd, read=ftype is FrameType.CLIENT_READ_STRONG)
            self._submit(conn, req, self.loop.time() + LEADERLESS_WAIT)

    def _live_leader(self) -> int | None:
        """The leader this replica follows, if the link to it is up."""
        lid = self.node.leader_id
        if lid is None or lid == self.id:
            return lid
        link = self.links.get(lid)
        return lid if link is not None and link.conn is not None else None

    def _submit(self, conn: AsyncConn, req: ClientRequest, deadline: float) -> None:
        """Hand a request to the node; while no live leader is known, hold it
        (polling) rather than bounce the client to a dead replica."""
        if conn.closed:
            return
        try:
            fut = self.node.submit(req)
        except NotLeader:
            hint = self._live_leader()
            if hint is None and self.loop.time() < deadline:
                self.loop.call_later(0.01, self._submit, conn, req, deadline)
            else:
                self._redirect(conn, req.request_id, hint)
            return
        except ShutdownError:
            self._reply(conn, Response(req.request_id, Result(Status.SHUTDOWN, b"")))
            return
        fut.add_done_callback(lambda f, rid=req.request_id: self._complete(conn, rid, f))

    def _complete(self, conn: AsyncConn, request_id: int, fut) -> None:
        exc = fut.exception()
        if exc is None:
            self._reply(conn, Response(request_id, fut.result()))
        elif isinstance(exc, NotLeader):
            self._redirect(conn, request_id, exc.hint)
        elif isinstance(exc, ShutdownError):
            self._reply(conn, Response(request_id, Result(Status.SHUTDOWN, b"")))
        else:
            self._reply(conn, Response(request_id, Result(Status.HANDLER_ERROR, str(exc).encode()[:200])))

    # --- meta heartbeat agent ------------------------------------------------------------------
    async def _meta_exchange(self, conn: AsyncConn, body: dict) -> dict:
        conn.send_bytes(json_frame(FrameType.META_REQUEST, body))
        ftype, payload = await conn.recv()
        return decode_message(ftype, payload)

    async def _agent(self) -> None:
        cfg = self.cfg
        host, port = parse_addr(cfg.meta)
        registered = False
        conn = None
        while self.running:
            try:
                if conn is None or conn.closed:
                    conn = await async_connect(host, port)
                    conn.send(Hello(PROTOCOL_VERSION, Role.AGENT, self.id))
                    await conn.recv()
                if not registered:
                    reply = await self._meta_exchange(conn, {
                        "op": "register", "name": cfg.cluster,
                        "replicas": [{"replica_id": r, "host": h, "port": p}
                                     for r, (h, p) in sorted(cfg.replicas.items())]})
                    if reply.get("ok") or reply.get("kind") == "duplicate":
                        registered = True
                    else:
                        log.error("replica %s: cluster registration refused: %s", self.id, reply.get("error"))
                reply = await self._meta_exchange(conn, {"op": "heartbeat", "name": cfg.cluster,
                                                         "replica_id": self.id, "stats": self.node.status()})
                self.meta_status = reply.get("status")
            except (OSError, ConnectionError, ProtocolError, ValueError) as e:
                log.debug("replica %s: meta heartbeat failed: %s", self.id, e)
                if conn is not None:
                    conn.close()
                conn = None
            await sleep(cfg.heartbeat_interval)

    # --- driving ------------------------------------------------------------------------------
    def serve_forever(self) -> None:
        self.loop.call_soon(self._start)
        try:
            self.loop.run(until_idle=False)
        finally:
            self._shutdown()

    def stop(self) -> None:
        """Thread-safe."""
        self.loop.post(self.loop.stop)

    def _shutdown(self) -> None:
        self.running = False
        if self.node is not None:
            self.node.stop()
            self.node.engine.stores[0].close()
            self.node.log.store.close()
        for link in self.links.values():
            if link.conn is not None:
                link.conn.close()
        self.sock.close()
        self.loop.close()


def start_thread(cfg: ServerConfig) -> tuple[ReplicaServer, threading.Thread]:
    """Run a replica on a background thread (tests, embedded use)."""
    srv = ReplicaServer(cfg)
    t = threading.Thread(target=srv.serve_forever, name=f"replica-{cfg.replica_id}", daemon=True)
    t.start()
    return srv, t


# --- local multi-process cluster ---------------------------------------------------------------------------
def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


class LocalCluster:
    """N replica processes (plus optionally a MetaServer process) on localhost."""

    def __init__(self, base_dir: str, n: int = 3, cluster: str = "local", with_meta: bool = True,
                 raft: RaftConfig | None = None, delays_ms: dict[int, float] | None = None,
                 heartbeat_interval: float = 0.5, extra_env: dict | None = None):
        self.base_dir = base_dir
        self.name = cluster
        ports = free_ports(n + 1)
        self.meta_addr = f"127.0.0.1:{ports[0]}" if with_meta else None
        self.replicas = {i + 1: ("127.0.0.1", ports[i + 1]) for i in range(n)}
        self.raft = raft or RaftConfig(checkpoint_every=1000, checkpoint_keep=100)
        self.delays = delays_ms or {}
        self.heartbeat_interval = heartbeat_interval
        self.procs: dict[int, subprocess.Popen] = {}
        self.meta_proc: subprocess.Popen | None = None
        self.env = dict(os.environ, **(extra_env or {}))
        os.makedirs(base_dir, exist_ok=True)

    def config_path(self, rid: int) -> str:
        return os.path.join(self.base_dir, f"replica-{rid}.conf")

    def _write_configs(self) -> None:
        for rid in self.replicas:
            cfg = ServerConfig(rid, self.replicas, os.path.join(self.base_dir, f"r{rid}"), cluster=self.name,
                               meta=self.meta_addr, heartbeat_interval=self.heartbeat_interval, raft=self.raft,
                               inject_delay_ms=self.delays.get(rid, 0.0))
            write_config(self.config_path(rid), cfg)

    def _spawn(self, args: list[str], log_name: str) -> subprocess.Popen:
        out = open(os.path.join(self.base_dir, log_name), "ab")
        try:
            return subprocess.Popen([sys.executable, "-m", "maxwellite", *args], stdout=out, stderr=subprocess.STDOUT,
                                    env=self.env)
        finally:
            out.close()

    def start(self, timeout: float = 20.0) -> "LocalCluster":
        self._write_configs()
        if self.meta_addr:
            self.meta_proc = self._spawn(["meta", "--listen", self.meta_addr, "--data",
                                          os.path.join(self.base_dir, "meta.db"),
                                          "--interval", str(self.heartbeat_interval)], "meta.log")
        for rid in self.replicas:
            self.start_replica(rid)
        self.wait_ready(timeout)
        return self

    def start_replica(self, rid: int) -> None:
        self.procs[rid] = self._spawn(["server", "--replica-id", str(rid), "--config", self.config_path(rid)],
                                      f"replica-{rid}.log")

    def kill(self, rid: int) -> None:
        p = self.procs.pop(rid, None)
        if p is not None:
            p.kill()
            p.wait()

    def leader(self, timeout: float = 1.0) -> int | None:
        from .netproto import BlockingConn
        for rid, (h, p) in self.replicas.items():
            if rid not in self.procs:
                continue
            try:
                c = BlockingConn(h, p, timeout=timeout)
            except OSError:
                continue
            try:
                c.send(Probe(0, rid, 1, 0))
                while True:
                    ftype, payload = c.recv(timeout)
                    msg = decode_message(ftype, payload)
                    if isinstance(msg, ProbeReply):
                        if msg.is_leader:
                            return rid
                        break
            except (OSError, TimeoutError, ProtocolError):
                pass
            finally:
                c.close()
        return None

    def wait_ready(self, timeout: float = 20.0) -> int:
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            for rid, p in self.procs.items():
                if p.poll() is not None:
                    raise RuntimeError(f"replica {rid} exited with {p.returncode}; see {self.base_dir}")
            lid = self.leader()
            if lid is not None:
                return lid
            time.sleep(0.1)
        raise TimeoutError("no leader elected")

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def shutdown(self) -> None:
        procs = list(self.procs.values()) + ([self.meta_proc] if self.meta_proc else [])
        self.procs.clear()
        self.meta_proc = None
        for p in procs:
            if p.poll() is None:
                p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
