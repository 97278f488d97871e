import time

import pytest

from maxwellite.consensus.node import RaftConfig, Role
from maxwellite.server import ServerConfig, free_ports, start_thread

FAST = RaftConfig(election_timeout=(0.15, 0.30), heartbeat=0.05, checkpoint_every=200, checkpoint_keep=50)


def wait_leader(servers, timeout=10.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        for srv, _ in servers:
            node = getattr(srv, "node", None)
            if node is not None and node.role is Role.LEADER:
                return srv.cfg.replica_id
        time.sleep(0.05)
    raise TimeoutError("no leader")


@pytest.fixture
def threaded(tmp_path):
    """Three replicas on background threads of this process, no MetaServer."""
    ports = free_ports(3)
    reps = {i + 1: ("127.0.0.1", ports[i]) for i in range(3)}
    servers = []
    for rid in reps:
        cfg = ServerConfig(rid, reps, str(tmp_path / f"r{rid}"), cluster="t", raft=FAST, deterministic_seed=3)
        servers.append(start_thread(cfg))
    yield reps, servers
    for srv, t in servers:
        srv.stop()
    for srv, t in servers:
        t.join(10)


# one PASS/FAIL line per acceptance criterion, shown after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
