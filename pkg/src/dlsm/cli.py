"""``dlsm`` command line: run components, a dev cluster, benchmarks and status.

Every process of a multi-process deployment reads the same cluster config
file and picks its own address with ``--index``. ``DLSM_<FIELD>``
environment variables override config fields.

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import signal
import sys
import threading
import time

from dlsm.errors import DlsmError, InvalidConfig

logger = logging.getLogger("dlsm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def load_config(path: str | None, **overrides):
    """Config file (or defaults), then env overrides, then explicit overrides."""
    from dlsm.cluster import ClusterConfig

    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = ClusterConfig.parse(fh.read())
        except FileNotFoundError:
            raise InvalidConfig(f"config file not found: {path}") from None
    else:
        cfg = ClusterConfig()
    cfg = cfg.with_env()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if cfg.stoc_addrs:
        # in a multi-process deployment the address list is the StoC count
        cfg = dataclasses.replace(cfg, n_stocs=len(cfg.stoc_addrs))
    return cfg.validate()


def _addr_list(text):
    return None if text is None else [a for a in text.split(",") if a]


def _own_addr(args, addrs: list, what: str) -> str:
    if args.listen:
        return args.listen
    return _pick(addrs, args.index, what)


def _pick(addrs: list, index: int, what: str) -> str:
    if not 0 <= index < len(addrs):
        raise InvalidConfig(f"--index {index} but the config lists {len(addrs)} {what} addresses")
    return addrs[index]


def _serve_until_signalled(servers: list, on_stop=None) -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        if on_stop is not None:
            on_stop()
        for s in servers:
            s.close()


# status formatting


def _hex(b) -> str:
    return "-" if b is None else bytes(b).hex() or "''"


def format_status(status: dict) -> str:
    """Stable, sorted text rendering of a coordinator status reply."""
    view = status["view"]
    ranges = {r: (lo, hi) for r, lo, hi in view["ranges"]}
    lines = [f"view v{view['version']}: {len(view['ltcs'])} LTCs, {len(view['stocs'])} StoCs, "
             f"{len(ranges)} ranges", ""]
    lines.append(f"{'RANGE':>5}  {'LOWER':<8} {'UPPER':<8} {'OWNER':<12} {'EPOCH':>5}")
    for rid in sorted(ranges, key=int):
        lo, hi = ranges[rid]
        owner, epoch = view["assignment"][str(rid)]
        lines.append(f"{rid:>5}  {_hex(lo):<8} {_hex(hi):<8} {owner:<12} {epoch:>5}")
    lines += ["", f"{'LTC':<12} {'ADDRESS':<22} {'ALIVE':<5} {'RANGES':>6} {'FLUSHES':>7} {'JOBS':>6} {'BACKLOG':>7}"]
    counts: dict = {}
    for owner, _ in view["assignment"].values():
        counts[owner] = counts.get(owner, 0) + 1
    for name, addr, alive in sorted(view["ltcs"]):
        st = status.get("ltcs", {}).get(name, {})
        if "error" in st:
            flushes = jobs = backlog = "?"
        else:
            flushes, jobs, backlog = st.get("flushes", 0), st.get("jobs_done", 0), st.get("backlog", 0)
        lines.append(f"{name:<12} {addr:<22} {'yes' if alive else 'no':<5} {counts.get(name, 0):>6} "
                     f"{flushes:>7} {jobs:>6} {backlog:>7}")
    lines += ["", f"{'STOC':<22} {'OUTSTANDING':>11} {'EWMA_US':>9} {'BYTES':>12} {'OBJECTS':>8}"]
    for addr in sorted(status.get("stocs", {})):
        st = status["stocs"][addr]
        if isinstance(st, dict):
            lines.append(f"{addr:<22} {'unreachable':>11}")
            continue
        out, ewma, nbytes, nobj = st
        lines.append(f"{addr:<22} {out:>11} {ewma:>9.1f} {nbytes:>12} {nobj:>8}")
    return "\n".join(lines) + "\n"


# component commands


def cmd_stoc(args) -> int:
    from dlsm.stoc import StoC
    from dlsm.transport import FrameServer, RealRuntime

    cfg = load_config(args.config, tier=args.tier, inject_latency_us=args.inject_latency_us)
    addr = _own_addr(args, cfg.stoc_addrs, "StoC")
    directory = args.dir
    if cfg.tier == "disk" and directory is None:
        if not cfg.data_dir:
            raise InvalidConfig("disk tier needs data_dir in the config or --dir")
        directory = os.path.join(cfg.data_dir, f"stoc-{args.index}")
    if directory:
        os.makedirs(directory, exist_ok=True)
    stoc = StoC(RealRuntime(), cfg.stoc_config(args.index, directory), addr)
    server = FrameServer(stoc, addr).start()
    logger.info("StoC %d serving on %s (%s tier)", args.index, server.address, cfg.tier)
    _serve_until_signalled([server], stoc.close)
    return EXIT_OK


def cmd_ltc(args) -> int:
    from dlsm.ltc import Ltc
    from dlsm.transport import FrameServer, RealRuntime, TcpTransport

    cfg = load_config(args.config, coordinator_addr=args.coordinator, stoc_addrs=_addr_list(args.stocs),
                      worker_addrs=_addr_list(args.workers), d=args.d, r=args.log_replicas)
    if not cfg.stoc_addrs:
        raise InvalidConfig("an LTC needs StoC addresses (--stocs or stoc_addrs)")
    addr = _own_addr(args, cfg.ltc_addrs, "LTC")
    runtime = RealRuntime()
    ltc = Ltc(runtime, TcpTransport(), list(cfg.stoc_addrs), cfg.ltc_config(args.index), f"ltc-{args.index}",
              cfg.coordinator_addr, list(cfg.worker_addrs), addr)
    server = FrameServer(ltc, addr).start()
    ltc.start()
    logger.info("LTC %s serving on %s", ltc.name, server.address)
    _serve_until_signalled([server], runtime.shutdown)
    return EXIT_OK


def cmd_compactor(args) -> int:
    from dlsm.transport import FrameServer, RealRuntime, TcpTransport
    from dlsm.worker import Worker

    cfg = load_config(args.config, worker_concurrency=args.max_concurrent)
    addr = _own_addr(args, cfg.worker_addrs, "worker")
    worker = Worker(RealRuntime(), TcpTransport(), cfg.worker_config(), f"worker-{args.index}")
    server = FrameServer(worker, addr).start()
    logger.info("compaction worker %d serving on %s", args.index, server.address)
    _serve_until_signalled([server])
    return EXIT_OK


def cmd_coord(args) -> int:
    from dlsm.coordinator import Coordinator
    from dlsm.errors import TransportError
    from dlsm.transport import FrameServer, RealRuntime, TcpTransport

    cfg = load_config(args.config, coordinator_addr=args.listen, n_ranges=args.ranges,
                      ltc_addrs=_addr_list(args.ltcs), stoc_addrs=_addr_list(args.stocs))
    if not cfg.ltc_addrs or not cfg.stoc_addrs:
        raise InvalidConfig("coordinator needs ltc_addrs and stoc_addrs in the config")
    runtime = RealRuntime()
    coord = Coordinator(runtime, TcpTransport(), list(cfg.stoc_addrs), cfg.coordinator_config(),
                        cfg.coordinator_addr)
    server = FrameServer(coord, cfg.coordinator_addr).start()
    view = coord.recover()
    if view is None:
        ltcs = [(f"ltc-{i}", a) for i, a in enumerate(cfg.ltc_addrs)]
        deadline = time.monotonic() + args.wait
        while True:
            try:
                view = coord.bootstrap(ltcs)
                break
            except TransportError as exc:
                if time.monotonic() > deadline:
                    server.close()
                    raise DlsmError(f"LTCs unreachable after {args.wait}s: {exc}") from None
                time.sleep(0.5)
        logger.info("bootstrapped view v%d", view.version)
    else:
        logger.info("recovered view v%d", view.version)
    coord.start()
    _serve_until_signalled([server], runtime.shutdown)
    return EXIT_OK


def cmd_devcluster(args) -> int:
    from dlsm.bench import WorkloadSpec, run_workload
    from dlsm.cluster import DevCluster, LocalCluster

    cfg = load_config(args.config, n_ltcs=args.ltcs, n_stocs=args.stocs, n_workers=args.workers,
                      seed=args.seed)
    if args.tcp:
        cluster = LocalCluster(cfg)
        print(f"coordinator listening on {cluster.coordinator_addr}", flush=True)
        try:
            if args.duration:
                time.sleep(args.duration)
            else:
                _serve_until_signalled([])
        finally:
            cluster.shutdown()
        return EXIT_OK
    cluster = DevCluster(cfg)
    try:
        spec = WorkloadSpec(read_fraction=0.5, key_count=max(1, args.ops // 2), ops=args.ops, duration=3600.0,
                            client_threads=2, seed=cfg.seed)
        metrics = run_workload(spec, cluster, verify=True)
        cluster.run_until_idle()
        sys.stdout.write(format_status(cluster.coordinator.cluster_status()))
        print(f"\n{metrics.total_ops} ops in {metrics.duration:.3f} simulated s, "
              f"{len(metrics.mismatches)} oracle mismatches")
        return EXIT_OK if not metrics.mismatches and not metrics.errors else EXIT_RUNTIME
    finally:
        cluster.shutdown()


def cmd_status(args) -> int:
    from dlsm.transport import Op, Rpc, TcpTransport

    transport = TcpTransport()
    try:
        status = Rpc(transport, args.timeout).call(args.coordinator, Op.CLUSTER_STATUS, {})
    finally:
        transport.close()
    sys.stdout.write(format_status(status))
    return EXIT_OK


def cmd_bench_run(args) -> int:
    from dlsm.bench import WorkloadSpec, emit_report, run_workload
    from dlsm.cluster import DevCluster, LocalCluster

    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = WorkloadSpec.from_json(fh.read())
    except FileNotFoundError:
        raise InvalidConfig(f"spec file not found: {args.spec}") from None
    cfg = load_config(args.config)
    cluster = LocalCluster(cfg) if args.tcp else DevCluster(cfg)
    try:
        metrics = run_workload(spec, cluster, verify=args.verify)
    finally:
        cluster.shutdown()
    paths = emit_report(metrics, args.out, title="bench run")
    print(f"{metrics.total_ops} ops, {metrics.throughput():.1f} ops/s, report in {paths['summary.md']}")
    if args.verify and metrics.mismatches:
        for m in metrics.mismatches[:10]:
            print(f"mismatch: {m}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench_elasticity(args) -> int:
    from dlsm.bench import elasticity_scenario, emit_report

    if args.max_ltcs < 1 or args.stocs < 1:
        raise InvalidConfig("--max-ltcs and --stocs must be >= 1")
    result = elasticity_scenario(max_ltcs=args.max_ltcs, stocs=args.stocs, seed=args.seed)
    paths = emit_report(result.metrics, args.out, title=f"elasticity 1..{args.max_ltcs} LTCs")
    for p in result.plateaus:
        print(f"{p.phase:<4} {p.ltcs} LTCs: {p.throughput:9.1f} ops/s  p99 {p.p99_us / 1000:7.2f} ms")
    moved = sum(1 for m in result.migrations if m.moved_data)
    print(f"{len(result.migrations)} migrations, {moved} moved data; report in {paths['summary.md']}")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(load_config(args.config).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlsm", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def component(name: str, fn, help_text: str):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="cluster config JSON")
        sp.add_argument("--index", type=int, default=0, help="which address in the config is ours")
        sp.add_argument("--listen", help="host:port to serve on (overrides --index)")
        sp.set_defaults(func=fn)
        return sp

    sp = component("stoc", cmd_stoc, "run a storage component")
    sp.add_argument("--dir", help="data directory override")
    sp.add_argument("--tier", choices=["mem", "disk"])
    sp.add_argument("--inject-latency-us", type=float)
    sp = component("ltc", cmd_ltc, "run an LSM-tree component")
    sp.add_argument("--coordinator", help="coordinator host:port")
    sp.add_argument("--stocs", help="comma-separated StoC addresses")
    sp.add_argument("--workers", help="comma-separated compaction worker addresses")
    sp.add_argument("--d", type=int, help="power-of-d sample size")
    sp.add_argument("--log-replicas", type=int)
    sp = component("compactor", cmd_compactor, "run a compaction worker")
    sp.add_argument("--max-concurrent", type=int)
    sp = sub.add_parser("coord", help="run the coordinator")
    sp.add_argument("--config")
    sp.add_argument("--listen", help="host:port to serve on")
    sp.add_argument("--ranges", type=int)
    sp.add_argument("--ltcs", help="comma-separated LTC addresses")
    sp.add_argument("--stocs", help="comma-separated StoC addresses")
    sp.add_argument("--wait", type=float, default=30.0, help="seconds to wait for LTCs at bootstrap")
    sp.set_defaults(func=cmd_coord)

    sp = sub.add_parser("devcluster", help="whole cluster in one process")
    sp.add_argument("--config", help="cluster config JSON (defaults otherwise)")
    sp.add_argument("--ltcs", type=int)
    sp.add_argument("--stocs", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ops", type=int, default=2000, help="smoke workload size (simulator mode)")
    sp.add_argument("--tcp", action="store_true", help="real threads and sockets; serve until interrupted")
    sp.add_argument("--duration", type=float, help="with --tcp, stop after this many seconds")
    sp.set_defaults(func=cmd_devcluster)

    cluster = sub.add_parser("cluster", help="inspect a running cluster")
    csub = cluster.add_subparsers(dest="cluster_command", required=True)
    sp = csub.add_parser("status", help="assignment table and component stats")
    sp.add_argument("--coordinator", required=True, help="host:port")
    sp.add_argument("--timeout", type=float, default=5.0)
    sp.set_defaults(func=cmd_status)

    bench = sub.add_parser("bench", help="benchmarks")
    bsub = bench.add_subparsers(dest="bench_command", required=True)
    sp = bsub.add_parser("run", help="drive a workload spec")
    sp.add_argument("--spec", required=True, help="workload spec JSON")
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--config", help="cluster config JSON")
    sp.add_argument("--verify", action="store_true", help="check every read against an oracle")
    sp.add_argument("--tcp", action="store_true", help="run over TCP instead of the simulator")
    sp.set_defaults(func=cmd_bench_run)
    sp = bsub.add_parser("elasticity", help="scale LTCs out and back in under load")
    sp.add_argument("--max-ltcs", type=int, default=3)
    sp.add_argument("--stocs", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="elasticity-report")
    sp.set_defaults(func=cmd_bench_elasticity)

    sp = sub.add_parser("config", help="print the effective config")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DlsmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
