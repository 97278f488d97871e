import os
import shutil
import subprocess
import sys
import time

import pytest

from maxwellite.compute import Status, account_key
from maxwellite.netproto import RetriesExhausted, connect, connect_direct
from maxwellite.server import LocalCluster, ServerConfig, free_ports, load_config, parse_replicas, write_config

from conftest import FAST, wait_leader as _wait_leader

def test_config_roundtrip(tmp_path):
    reps = {1: ("127.0.0.1", 7001), 2: ("127.0.0.1", 7002), 3: ("127.0.0.1", 7003)}
    cfg = ServerConfig(2, reps, str(tmp_path / "r{id}"), cluster="bank", meta="127.0.0.1:7000",
                       max_tasks=512, io_backend="native", deterministic_seed=11, raft=FAST, inject_delay_ms=4.5)
    path = tmp_path / "r.conf"
    write_config(str(path), cfg)
    text = path.read_text()
    for key in ("runtime.max_tasks", "runtime.io_backend", "runtime.deterministic_seed"):
        assert key in text
    back = load_config(str(path), 2)
    assert back.replicas == reps and back.cluster == "bank" and back.meta == "127.0.0.1:7000"
    assert (back.max_tasks, back.io_backend, back.deterministic_seed) == (512, "native", 11)
    assert back.raft.checkpoint_every == 200 and back.raft.election_timeout == (0.15, 0.30)
    assert back.inject_delay_ms == 4.5
    assert back.data_dir == str(tmp_path / "r2")


def test_config_errors(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("replicas = 1@127.0.0.1:7001\n")
    with pytest.raises(ValueError):
        load_config(str(path), 4)
    with pytest.raises(ValueError):
        parse_replicas("1@nohostport")
    path.write_text("replicas = 1@127.0.0.1:7001\nruntime.deterministic_seed =\n")
    assert load_config(str(path), 1).deterministic_seed is None


def test_submit_and_query_through_threaded_cluster(threaded):
    reps, servers = threaded
    lid = _wait_leader(servers)
    with connect_direct(reps, client_id=77) as h:
        a, b = account_key(1), account_key(2)
        assert h.submit("open", (a, 100, 0)).status is Status.OK
        assert h.submit("open", (b, 0, 0)).status is Status.OK
        res = h.submit("transfer", (a, b, 30))
        assert res.status is Status.OK and h.decode("transfer", res) == (70, 1, 30, 1)
        assert h.submit("withdraw", (b, 1000)).status is Status.INSUFFICIENT_FUNDS
        assert h.decode("query", h.query("query", (a,)))[:2] == (70, 1)
        assert h.leader_hint == lid
        # weak reads eventually observe the committed state on every replica
        h.probe_once()
        end = time.monotonic() + 5
        while time.monotonic() < end:
            r = h.query("query", (b,), mode="weak")
            if r.status is Status.OK and h.decode("query", r)[0] == 30:
                break
            time.sleep(0.05)
        else:
            pytest.fail("weak read never caught up")


def test_client_follows_redirect_from_follower(threaded):
    reps, servers = threaded
    lid = _wait_leader(servers)
    follower = next(r for r in reps if r != lid)
    with connect_direct(reps, client_id=78, attempts=1) as h:
        h.leader_hint = follower
        # a single failed attempt is allowed, but the redirect itself is free
        assert h.submit("open", (account_key(9), 5, 0)).status is Status.OK
        assert h.leader_hint == lid


def test_retries_exhausted_when_cluster_unreachable():
    ports = free_ports(3)
    reps = {i + 1: ("127.0.0.1", ports[i]) for i in range(3)}
    with connect_direct(reps, client_id=5, attempts=3, backoff=0.001, timeout=0.3) as h:
        with pytest.raises(RetriesExhausted):
            h.submit("open", (account_key(1), 1, 0))


def test_duplicate_request_id_applied_once(threaded):
    reps, servers = threaded
    _wait_leader(servers)
    with connect_direct(reps, client_id=79) as h:
        a = account_key(3)
        h.submit("open", (a, 0, 0))
        # resend the same request id three times: one apply, identical answers
        from maxwellite.netproto import ClientCall, FrameType
        call = ClientCall(FrameType.CLIENT_PROPOSE, 10_000, h.client_id, "deposit", h._encode("deposit", (a, 5)))
        results = [h._exchange(h.leader_hint, call, 5).result for _ in range(3)]
        assert len({(r.status, r.payload) for r in results}) == 1
        assert h.decode("query", h.query("query", (a,)))[:2] == (5, 1)


def test_local_cluster_leader_kill_failover(tmp_path):
    with LocalCluster(str(tmp_path), n=3, raft=FAST, heartbeat_interval=0.2) as lc:
        with connect(lc.meta_addr, lc.name, client_id=91, probe=False) as h:
            a = account_key(1)
            assert h.submit("open", (a, 0, 0)).status is Status.OK
            for _ in range(5):
                assert h.submit("deposit", (a, 1)).status is Status.OK
            old = lc.leader()
            lc.kill(old)
            t0 = time.monotonic()
            # the first request after the crash rides out the election within the retry budget
            res = h.submit("deposit", (a, 1))
            assert res.status is Status.OK
            assert time.monotonic() - t0 < 10
            assert h.leader_hint != old
            assert h.decode("query", h.query("query", (a,)))[:2] == (6, 6)
            # the MetaServer eventually reports the dead replica Down
            end = time.monotonic() + 5
            while time.monotonic() < end:
                h.refresh()
                if h.replicas[old].status == "Down":
                    break
                time.sleep(0.2)
            assert h.replicas[old].status == "Down"


def test_cli_help_and_dump(tmp_path):
    env = dict(os.environ)
    out = subprocess.run([sys.executable, "-m", "maxwellite", "--help"], capture_output=True, text=True, env=env)
    assert out.returncode == 0
    for sub in ("meta", "server", "bench"):
        assert sub in out.stdout
    out = subprocess.run([sys.executable, "-m", "maxwellite", "bench", "--help"], capture_output=True, text=True)
    for flag in ("--meta", "--cluster", "--clients", "--tps", "--duration", "--hot-fraction", "--seed", "--out",
                 "--target"):
        assert flag in out.stdout
    from maxwellite.pagestore import Store
    path = str(tmp_path / "d.db")
    st = Store.open(path)
    from maxwellite.datamodel import ColumnType, Schema
    st.create_table("t", Schema([("v", ColumnType.LONG)]))
    st.upsert("t", b"k", (1,))
    st.flush()
    st.close()
    exe = shutil.which("maxwellite-dump")
    cmd = [exe] if exe else [sys.executable, "-m", "maxwellite.pagestore.dump"]
    out = subprocess.run(cmd + [path], capture_output=True, text=True)
    assert out.returncode == 0 and "table t" in out.stdout and "clean=True" in out.stdout
