"""Cluster configuration and single-process clusters.

:class:`DevCluster` runs every component in one process over the
deterministic simulator. :class:`LocalCluster` runs the same components on
real threads behind TCP servers on localhost.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field

from dlsm.client import Client
from dlsm.coordinator import Coordinator, CoordinatorConfig
from dlsm.errors import InvalidConfig
from dlsm.ltc import Ltc, LtcConfig
from dlsm.stoc import StoC, StoCConfig
from dlsm.transport import FrameServer, RealRuntime, SimNetwork, SimRuntime, TcpTransport
from dlsm.worker import Worker, WorkerConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "DLSM_"


@dataclass
class ClusterConfig:
    n_ltcs: int = 1
    n_stocs: int = 1
    n_workers: int = 1
    n_ranges: int = 4
    d: int = 2  # larger than n_stocs means "sample every StoC"
    r: int = 1
    tier: str = "mem"
    data_dir: str | None = None
    seed: int = 0
    # simulator network and StoC latency injection
    net_latency_us: float = 20.0
    net_jitter_us: float = 5.0
    inject_latency_us: float = 0.0
    inject_jitter_us: float = 0.0
    stoc_service_time_us: float = 5.0
    stoc_lanes: int = 8
    stoc_fsync: bool = True
    # LTC
    memtable_bytes: int = 4 << 20
    max_immutables: int = 2
    l0_trigger: int = 4
    size_ratio: int = 10
    level_base_bytes: int = 16 << 20
    max_output_bytes: int = 4 << 20
    block_size: int = 4096
    compaction_mode: str = "remote"
    max_jobs_per_range: int = 2
    handoff_flush_bytes: int = 1 << 20
    ltc_op_cost_us: float = 0.0
    ltc_cpu_lanes: int = 1
    gc_grace_s: float = 1.0
    # workers
    worker_concurrency: int = 1
    worker_queue: int = 64
    worker_cost_per_byte_ns: float = 0.0
    # coordinator
    heartbeat_s: float = 0.5
    failure_detection: bool = True
    # addresses for multi-process deployments
    coordinator_addr: str = "127.0.0.1:7000"
    ltc_addrs: list = field(default_factory=list)
    stoc_addrs: list = field(default_factory=list)
    worker_addrs: list = field(default_factory=list)

    def validate(self) -> "ClusterConfig":
        problems = []
        if self.n_ltcs < 1:
            problems.append("n_ltcs must be >= 1")
        if self.n_stocs < 1:
            problems.append("n_stocs must be >= 1")
        if self.n_workers < 0:
            problems.append("n_workers must be >= 0")
        if self.n_ranges < max(1, self.n_ltcs):
            problems.append("n_ranges must be >= n_ltcs")
        if self.d < 1:
            problems.append("d must be >= 1")
        if not 1 <= self.r <= max(1, self.n_stocs):
            problems.append(f"r must be in 1..{self.n_stocs}")
        if self.tier not in ("mem", "disk"):
            problems.append("tier must be mem or disk")
        if self.compaction_mode not in ("remote", "local", "off"):
            problems.append("compaction_mode must be remote, local or off")
        if self.memtable_bytes < 1024:
            problems.append("memtable_bytes must be >= 1024")
        if self.l0_trigger < 2:
            problems.append("l0_trigger must be >= 2")
        addrs = [self.coordinator_addr, *self.ltc_addrs, *self.stoc_addrs, *self.worker_addrs]
        if len(set(addrs)) != len(addrs):
            problems.append("addresses must be unique")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    # serialization
    def render(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ClusterConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def with_env(self, environ=None) -> "ClusterConfig":
        """Apply ``DLSM_<FIELD>`` overrides, e.g. ``DLSM_N_LTCS=3``."""
        environ = os.environ if environ is None else environ
        changes = {}
        for f in dataclasses.fields(self):
            raw = environ.get(ENV_PREFIX + f.name.upper())
            if raw is None:
                continue
            current = getattr(self, f.name)
            try:
                if isinstance(current, bool):
                    changes[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int):
                    changes[f.name] = int(raw)
                elif isinstance(current, float):
                    changes[f.name] = float(raw)
                elif isinstance(current, list):
                    changes[f.name] = [a for a in raw.split(",") if a]
                else:
                    changes[f.name] = raw
            except ValueError:
                raise InvalidConfig(f"bad value for {ENV_PREFIX}{f.name.upper()}: {raw!r}") from None
        return dataclasses.replace(self, **changes)

    # component configs
    def stoc_config(self, i: int, directory: str | None = None) -> StoCConfig:
        return StoCConfig(
            tier=self.tier, directory=directory, inject_latency_us=self.inject_latency_us,
            inject_jitter_us=self.inject_jitter_us, service_time_us=self.stoc_service_time_us,
            lanes=self.stoc_lanes, fsync=self.stoc_fsync, seed=self.seed * 1000 + i,
        )

    def ltc_config(self, i: int) -> LtcConfig:
        return LtcConfig(
            d=min(self.d, self.n_stocs), log_replicas=self.r, memtable_bytes=self.memtable_bytes,
            max_immutables=self.max_immutables, block_size=self.block_size,
            max_output_bytes=self.max_output_bytes, l0_trigger=self.l0_trigger,
            size_ratio=self.size_ratio, level_base_bytes=self.level_base_bytes,
            compaction_mode=self.compaction_mode, max_jobs_per_range=self.max_jobs_per_range,
            handoff_flush_bytes=self.handoff_flush_bytes, op_cost_s=self.ltc_op_cost_us * 1e-6,
            cpu_lanes=self.ltc_cpu_lanes, gc_grace_s=self.gc_grace_s, heartbeat_s=self.heartbeat_s,
            seed=self.seed * 1000 + 500 + i,
        )

    def worker_config(self) -> WorkerConfig:
        return WorkerConfig(self.worker_concurrency, self.worker_queue, self.worker_cost_per_byte_ns * 1e-9)

    def coordinator_config(self) -> CoordinatorConfig:
        return CoordinatorConfig(self.n_ranges, self.heartbeat_s, failure_detection=self.failure_detection)


class _ClusterBase:
    """Bookkeeping shared by the simulated and TCP clusters."""

    config: ClusterConfig

    def _stoc_dir(self, i: int) -> str | None:
        if self.config.tier != "disk":
            return None
        if self._data_dir is None:
            self._data_dir = self.config.data_dir or tempfile.mkdtemp(prefix="dlsm-")
        path = os.path.join(self._data_dir, f"stoc-{i}")
        os.makedirs(path, exist_ok=True)
        return path

    def component(self, name: str):
        for group in (self.stocs, self.ltcs, self.workers):
            if name in group:
                return group[name]
        if name == self.coordinator_addr:
            return self.coordinator
        raise KeyError(name)

    def placements(self) -> dict:
        """``{ObjectId: stoc}`` over every range manifest currently served."""
        out = {}
        for ltc in self.ltcs.values():
            if ltc.alive:
                out.update(ltc.placements())
        return out

    def stored_objects(self) -> dict:
        """``{(stoc, ObjectId): size}`` for every non-manifest object on live StoCs."""
        out = {}
        for name, stoc in self.stocs.items():
            if not stoc.alive:
                continue
            for oid, n in stoc.backing.list():
                if not oid.is_manifest:
                    out[(name, oid)] = n
        return out

    def backlog(self) -> int:
        return sum(ltc.backlog() for ltc in self.ltcs.values() if ltc.alive)

    def idle(self) -> bool:
        return all(ltc.idle() for ltc in self.ltcs.values() if ltc.alive)

    def flush_all(self) -> None:
        for ltc in self.ltcs.values():
            if ltc.alive:
                for rid in sorted(ltc.ranges):
                    try:
                        ltc.flush_range(rid)
                    except Exception as exc:  # empty ranges and the like
                        logger.debug("flush of %d skipped: %s", rid, exc)


class DevCluster(_ClusterBase):
    """All components in one process over the simulator. Deterministic per seed."""

    def __init__(self, config: ClusterConfig | None = None):
        self.config = (config or ClusterConfig()).validate()
        cfg = self.config
        self.runtime = SimRuntime()
        self.net = SimNetwork(self.runtime, cfg.seed, cfg.net_latency_us * 1e-6, cfg.net_jitter_us * 1e-6)
        self._data_dir = None
        self.coordinator_addr = "coord"
        self.stocs: dict[str, StoC] = {}
        self.ltcs: dict[str, Ltc] = {}
        self.workers: dict[str, Worker] = {}
        for i in range(cfg.n_stocs):
            self._add_stoc(i)
        for i in range(cfg.n_workers):
            name = f"worker-{i}"
            self.workers[name] = Worker(self.runtime, self.net.transport(name), cfg.worker_config(), name)
            self.net.register(name, self.workers[name])
        self.coordinator = Coordinator(self.runtime, self.net.transport(self.coordinator_addr),
                                       list(self.stocs), cfg.coordinator_config(), self.coordinator_addr)
        self.net.register(self.coordinator_addr, self.coordinator)
        for i in range(cfg.n_ltcs):
            self._new_ltc(f"ltc-{i}")
        self._next_ltc = cfg.n_ltcs
        self.coordinator.bootstrap(list(self.ltcs))
        self.coordinator.start()
        for ltc in self.ltcs.values():
            ltc.start()

    def _add_stoc(self, i: int) -> None:
        name = f"stoc-{i}"
        self.stocs[name] = StoC(self.runtime, self.config.stoc_config(i, self._stoc_dir(i)), name)
        self.net.register(name, self.stocs[name])

    def _new_ltc(self, name: str) -> Ltc:
        i = int(name.rsplit("-", 1)[1])
        ltc = Ltc(self.runtime, self.net.transport(name), list(self.stocs), self.config.ltc_config(i),
                  name, self.coordinator_addr, list(self.workers))
        ltc.on_crash.append(lambda c: self.net.kill(c.name))
        self.ltcs[name] = ltc
        self.net.register(name, ltc)
        return ltc

    @property
    def stoc_names(self) -> list:
        return list(self.stocs)

    def client(self, name: str = "client", **kw) -> Client:
        return Client(self.net.transport(name), self.coordinator_addr, self.runtime, **kw)

    def now(self) -> float:
        return self.runtime.now()

    def run_for(self, dt: float) -> None:
        self.runtime.run_for(dt)

    def run_until_idle(self, max_time: float = 60.0, step: float = 0.05) -> bool:
        deadline = self.runtime.now() + max_time
        while self.runtime.now() < deadline:
            self.runtime.run_for(step)
            if self.idle():
                return True
        return self.idle()

    def kill(self, name: str) -> None:
        comp = self.component(name)
        if isinstance(comp, Ltc):
            comp.crash()
        else:
            comp.alive = False
        self.net.kill(name)

    def restart(self, name: str) -> None:
        comp = self.component(name)
        comp.restart()
        self.net.register(name, comp)

    def add_ltc(self) -> str:
        name = f"ltc-{self._next_ltc}"
        self._next_ltc += 1
        ltc = self._new_ltc(name)
        ltc.start()
        self.coordinator.add_ltc(name, name)
        return name

    def remove_ltc(self, name: str | None = None) -> str:
        view = self.coordinator.view
        if name is None:
            name = sorted(view.live_ltcs(), key=lambda n: int(n.rsplit("-", 1)[1]))[-1]
        self.coordinator.remove_ltc(name)
        ltc = self.ltcs.pop(name)
        ltc.alive = False
        self.net.unregister(name)
        return name

    def shutdown(self) -> None:
        for stoc in self.stocs.values():
            stoc.close()


class LocalCluster(_ClusterBase):
    """The same components on real threads, each behind its own TCP server."""

    def __init__(self, config: ClusterConfig | None = None, host: str = "127.0.0.1"):
        self.config = (config or ClusterConfig()).validate()
        cfg = self.config
        self.runtime = RealRuntime()
        self._data_dir = None
        self._servers: dict[str, FrameServer] = {}
        self._transports: list = []
        self.stocs: dict[str, StoC] = {}
        self.ltcs: dict[str, Ltc] = {}
        self.workers: dict[str, Worker] = {}
        self.host = host
        for i in range(cfg.n_stocs):
            stoc = StoC(self.runtime, cfg.stoc_config(i, self._stoc_dir(i)), f"stoc-{i}")
            addr = self._serve(stoc)
            stoc.name = addr
            self.stocs[addr] = stoc
        for i in range(cfg.n_workers):
            worker = Worker(self.runtime, self._transport(), cfg.worker_config(), f"worker-{i}")
            self.workers[self._serve(worker)] = worker
        self.coordinator = Coordinator(self.runtime, self._transport(), list(self.stocs),
                                       cfg.coordinator_config())
        self.coordinator_addr = self._serve(self.coordinator)
        for i in range(cfg.n_ltcs):
            self._new_ltc(i)
        self._next_ltc = cfg.n_ltcs
        self.coordinator.bootstrap([(ltc.name, addr) for addr, ltc in self.ltcs.items()])
        self.coordinator.start()
        for ltc in self.ltcs.values():
            ltc.start()

    def _transport(self) -> TcpTransport:
        t = TcpTransport()
        self._transports.append(t)
        return t

    def _serve(self, service) -> str:
        server = FrameServer(service, f"{self.host}:0").start()
        self._servers[server.address] = server
        return server.address

    def _new_ltc(self, i: int) -> Ltc:
        ltc = Ltc(self.runtime, self._transport(), list(self.stocs), self.config.ltc_config(i),
                  f"ltc-{i}", workers=list(self.workers))
        addr = self._serve(ltc)
        ltc.address = addr
        ltc.coordinator = self.coordinator_addr
        self.ltcs[addr] = ltc
        return ltc

    def client(self, **kw) -> Client:
        return Client(self._transport(), self.coordinator_addr, self.runtime, **kw)

    def add_ltc(self) -> str:
        ltc = self._new_ltc(self._next_ltc)
        self._next_ltc += 1
        ltc.start()
        self.coordinator.add_ltc(ltc.name, ltc.address)
        return ltc.address

    def run_for(self, dt: float) -> None:
        self.runtime.run_for(dt)

    def shutdown(self) -> None:
        for ltc in self.ltcs.values():
            ltc.alive = False
        self.coordinator.alive = False
        for server in self._servers.values():
            server.close()
        for t in self._transports:
            t.close()
        for stoc in self.stocs.values():
            stoc.close()
        self.runtime.shutdown()
