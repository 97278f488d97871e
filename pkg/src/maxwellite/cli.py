"""``maxwellite`` command line: meta, server and bench subcommands."""
from __future__ import annotations

import argparse
import logging
import signal
import sys


def _stop_on_signals(stop) -> None:
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop())


def cmd_meta(args) -> int:
    from .cluster import run_meta
    svc = run_meta(args.listen, args.data, interval=args.interval)
    print(f"meta listening on {svc.addr}", flush=True)
    _stop_on_signals(svc.stop)
    try:
        svc.serve_forever()
    finally:
        svc.close()
    return 0


def cmd_server(args) -> int:
    from .server import ReplicaServer, load_config
    cfg = load_config(args.config, args.replica_id)
    srv = ReplicaServer(cfg)
    print(f"replica {cfg.replica_id} of {cfg.cluster} listening on %s:%d" % cfg.addr, flush=True)
    _stop_on_signals(srv.stop)
    srv.serve_forever()
    return 0


def cmd_bench(args) -> int:
    from .bench import WorkloadSpec, bench_main
    spec = WorkloadSpec(clients=args.clients, target_tps=args.tps, duration=args.duration,
                        accounts=args.accounts, hot_fraction=args.hot_fraction, seed=args.seed,
                        transfer_ratio=args.transfer_ratio)
    return bench_main(spec, meta=args.meta, cluster=args.cluster, out=args.out, target=args.target,
                      plot=not args.no_plot, preload=args.preload)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maxwellite")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("meta", help="run the MetaServer")
    m.add_argument("--listen", required=True, help="host:port")
    m.add_argument("--data", required=True, help="database file for registrations")
    m.add_argument("--interval", type=float, default=2.0, help="expected heartbeat interval, seconds")
    m.set_defaults(fn=cmd_meta)

    s = sub.add_parser("server", help="run one replica")
    s.add_argument("--replica-id", type=int, required=True)
    s.add_argument("--config", required=True, help="flat key=value config file")
    s.set_defaults(fn=cmd_server)

    b = sub.add_parser("bench", help="open-loop hot-account workload")
    b.add_argument("--meta", help="MetaServer host:port (maxwellite target)")
    b.add_argument("--cluster", default="default")
    b.add_argument("--clients", type=int, default=100)
    b.add_argument("--tps", type=float, default=20_000)
    b.add_argument("--duration", type=float, default=60)
    b.add_argument("--hot-fraction", type=float, default=0.9)
    b.add_argument("--transfer-ratio", type=float, default=0.8)
    b.add_argument("--accounts", type=int, default=1000)
    b.add_argument("--preload", type=int, default=0, help="cold rows loaded before the run")
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--out", default="results.csv")
    b.add_argument("--target", choices=("maxwell", "lsm"), default="maxwell")
    b.add_argument("--no-plot", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
