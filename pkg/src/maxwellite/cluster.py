"""MetaServer: directory of clusters and their replicas, plus liveness from
replica heartbeats (Up within 3 intervals, Down after, Unknown before any)."""
from __future__ import annotations

import ipaddress
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

from .datamodel import ColumnType, Schema
from .netproto import (AsyncConn, FrameType, ProtocolError, accept_loop, decode_message, json_frame,
                       listen_socket, parse_addr, server_handshake)
from .pagestore import Store
from .runtime import Loop

log = logging.getLogger(__name__)

CLUSTERS = "clusters"
CLUSTER_SCHEMA = Schema([("replicas", ColumnType.BINARY)])
VALID_COUNTS = (3, 5)
MISSED_INTERVALS = 3


class MetaError(Exception):
    kind = "error"


class DuplicateCluster(MetaError):
    kind = "duplicate"


class InvalidCount(MetaError):
    kind = "invalid_count"


class UnknownCluster(MetaError):
    kind = "unknown_cluster"


class UnknownReplica(MetaError):
    kind = "unknown_replica"


class InvalidReplica(MetaError):
    kind = "invalid_replica"


@dataclass
class ReplicaInfo:
    replica_id: int
    host: str
    port: int
    status: str = "Unknown"
    last_heartbeat: float | None = None
    stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"replica_id": self.replica_id, "host": self.host, "port": self.port, "status": self.status,
                "last_heartbeat": self.last_heartbeat, "stats": self.stats}


@dataclass
class ClusterInfo:
    name: str
    replicas: list[ReplicaInfo]

    @property
    def replica_count(self) -> int:
        return len(self.replicas)

    def to_json(self) -> dict:
        return {"name": self.name, "replica_count": self.replica_count,
                "replicas": [r.to_json() for r in self.replicas]}


def _validate(name: str, replicas: list[ReplicaInfo]) -> None:
    if not name:
        raise InvalidReplica("cluster name must be non-empty")
    if len(replicas) not in VALID_COUNTS:
        raise InvalidCount(f"cluster needs 3 or 5 replicas, got {len(replicas)}")
    ids = [r.replica_id for r in replicas]
    if len(set(ids)) != len(ids):
        raise InvalidReplica("replica ids must be unique")
    addrs = [(r.host, r.port) for r in replicas]
    if len(set(addrs)) != len(addrs):
        raise InvalidReplica("replica addresses must be unique")
    for r in replicas:
        ipaddress.ip_address(r.host)  # ValueError on a non-IP host
        if not 0 < r.port < 65536:
            raise InvalidReplica(f"bad port {r.port}")


class MetaServer:
    """Registrations persist in a pagestore database; heartbeat state is
    volatile, so every replica reads Unknown after a MetaServer restart until
    it reports again."""

    def __init__(self, store: Store, interval: float = 2.0, clock: Callable[[], float] = time.monotonic):
        self.store = store
        self.interval = interval
        self.clock = clock
        if not store.has_table(CLUSTERS):
            store.create_table(CLUSTERS, CLUSTER_SCHEMA)
            store.flush()
        self._clusters: dict[str, list[ReplicaInfo]] = {}
        for key, (blob,) in store.range_scan(CLUSTERS):
            self._clusters[key.decode()] = [ReplicaInfo(r["replica_id"], r["host"], r["port"])
                                            for r in json.loads(blob)]

    def register_cluster(self, name: str, replicas) -> ClusterInfo:
        reps = [r if isinstance(r, ReplicaInfo) else ReplicaInfo(int(r[0]), str(r[1]), int(r[2]))
                for r in replicas]
        if name in self._clusters:
            raise DuplicateCluster(f"cluster {name!r} already registered")
        try:
            _validate(name, reps)
        except ValueError as e:
            raise InvalidReplica(str(e)) from e
        blob = json.dumps([{"replica_id": r.replica_id, "host": r.host, "port": r.port} for r in reps]).encode()
        self.store.upsert(CLUSTERS, name.encode(), (blob,))
        self.store.flush()
        self._clusters[name] = reps
        return self.discover(name)

    def _status(self, r: ReplicaInfo) -> str:
        if r.last_heartbeat is None:
            return "Unknown"
        return "Up" if self.clock() - r.last_heartbeat < MISSED_INTERVALS * self.interval else "Down"

    def discover(self, name: str) -> ClusterInfo:
        reps = self._clusters.get(name)
        if reps is None:
            raise UnknownCluster(f"unknown cluster {name!r}")
        out = []
        for r in reps:
            out.append(ReplicaInfo(r.replica_id, r.host, r.port, self._status(r), r.last_heartbeat, dict(r.stats)))
        return ClusterInfo(name, out)

    def heartbeat(self, name: str, replica_id: int, stats: dict | None = None) -> str:
        reps = self._clusters.get(name)
        if reps is None:
            raise UnknownCluster(f"unknown cluster {name!r}")
        for r in reps:
            if r.replica_id == replica_id:
                r.last_heartbeat = self.clock()
                r.stats = dict(stats or {})
                return self._status(r)
        raise UnknownReplica(f"cluster {name!r} has no replica {replica_id}")

    def clusters(self) -> list[str]:
        return sorted(self._clusters)

    def handle(self, req: dict) -> dict:
        """JSON request dispatch for the wire service."""
        op = req.get("op")
        try:
            if op == "register":
                info = self.register_cluster(req["name"], [(r["replica_id"], r["host"], r["port"])
                                                           for r in req["replicas"]])
                return {"ok": True, "cluster": info.to_json()}
            if op == "discover":
                return {"ok": True, "cluster": self.discover(req["name"]).to_json()}
            if op == "heartbeat":
                return {"ok": True, "status": self.heartbeat(req["name"], int(req["replica_id"]),
                                                             req.get("stats"))}
            if op == "list":
                return {"ok": True, "clusters": self.clusters()}
            return {"ok": False, "error": f"unknown op {op!r}", "kind": "bad_request"}
        except MetaError as e:
            return {"ok": False, "error": str(e), "kind": e.kind}
        except (KeyError, TypeError, ValueError) as e:
            return {"ok": False, "error": f"malformed request: {e}", "kind": "bad_request"}


class MetaService:
    """MetaServer behind the framed protocol, on one runtime loop."""

    def __init__(self, meta: MetaServer, host: str = "127.0.0.1", port: int = 0, loop: Loop | None = None):
        self.meta = meta
        self.loop = loop or Loop()
        self.sock = listen_socket(host, port)
        self.addr = "%s:%d" % self.sock.getsockname()[:2]

    async def _serve_conn(self, conn: AsyncConn) -> None:
        try:
            await server_handshake(conn, 0)
            while True:
                ftype, payload = await conn.recv()
                if ftype is not FrameType.META_REQUEST:
                    raise ProtocolError(f"meta service does not accept {ftype.name}")
                conn.send_bytes(json_frame(FrameType.META_REPLY, self.meta.handle(decode_message(ftype, payload))))
        except (ConnectionError, ProtocolError) as e:
            log.debug("meta connection closed: %s", e)
        except ValueError as e:
            conn.send_bytes(json_frame(FrameType.ERROR, {"error": str(e), "kind": "protocol"}))
        finally:
            conn.close()

    def serve_forever(self) -> None:
        # spawn on the loop's own thread, which may not be the constructing one
        self.loop.call_soon(lambda: self.loop.spawn(accept_loop(self.sock, self._serve_conn), name="meta-accept"))
        self.loop.run(until_idle=False)

    def stop(self) -> None:
        self.loop.post(self.loop.stop)

    def close(self) -> None:
        self.sock.close()
        self.meta.store.close()


def run_meta(listen: str, data: str | None, interval: float = 2.0) -> MetaService:
    host, port = parse_addr(listen)
    return MetaService(MetaServer(Store.open(data), interval=interval), host, port)
