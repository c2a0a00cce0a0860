"""Workload driver and scripted cluster experiments.

On a :class:`~dlsm.cluster.DevCluster` every client is a chain of simulator
events, so a run is deterministic for a given seed and the per-second
numbers are in simulated time. On a TCP cluster each client is a thread
with its own connection.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from itertools import islice

from sortedcontainers import SortedDict

from dlsm.bench.metrics import Recorder, RunMetrics, percentiles
from dlsm.bench.workload import DELETE, READ, SCAN, WRITE, OpGenerator, WorkloadSpec
from dlsm.cluster import ClusterConfig, DevCluster
from dlsm.errors import ClusterUnavailable

logger = logging.getLogger(__name__)


def execute_op(client, op: tuple):
    """Run one generated op; returns ``(ok, result)``."""
    kind, key, payload = op
    try:
        if kind == READ:
            return True, client.get(key)
        if kind == WRITE:
            client.put(key, payload)
        elif kind == DELETE:
            client.delete(key)
        elif kind == SCAN:
            return True, client.scan(key, None, payload)
        return True, None
    except ClusterUnavailable as exc:
        return False, exc


class Oracle:
    """Sorted-map replay of acknowledged ops.

    A key whose last op failed may or may not have changed, so it is left
    out of read checks until the next acknowledged write or delete.
    """

    def __init__(self):
        self.data = SortedDict()
        self.uncertain: set = set()
        self.checked = 0

    def observe(self, op: tuple, ok: bool, result) -> str | None:
        kind, key, payload = op
        if kind in (WRITE, DELETE):
            if not ok:
                self.uncertain.add(key)
                return None
            self.uncertain.discard(key)
            if kind == WRITE:
                self.data[key] = payload
            else:
                self.data.pop(key, None)
            return None
        if not ok:
            return None
        if kind == READ:
            if key in self.uncertain:
                return None
            self.checked += 1
            want = self.data.get(key)
            if result != want:
                return f"get {key.hex()}: got {_short(result)}, want {_short(want)}"
            return None
        if self.uncertain:
            return None
        self.checked += 1
        want = [(k, self.data[k]) for k in islice(self.data.irange(key), payload)]
        if result != want:
            return f"scan {key.hex()} limit {payload}: got {len(result)} items, want {len(want)}"
        return None


def _short(v) -> str:
    if v is None:
        return "None"
    return v[:8].hex() + ("..." if len(v) > 8 else "")


class RunHandle:
    """What a controller callback sees while a run is in progress."""

    def __init__(self, cluster, spec: WorkloadSpec, recorder: Recorder, start: float):
        self.cluster = cluster
        self.spec = spec
        self.recorder = recorder
        self.start = start
        self.active = spec.client_threads
        self.stopped = False
        self.failure: BaseException | None = None
        self.issued = 0
        self.state: dict = {}

    def now(self) -> float:
        return self.cluster.runtime.now()

    def set_active(self, n: int) -> None:
        """Pause clients with index >= n (at least one client stays active)."""
        self.active = max(1, min(n, self.spec.client_threads))

    def stop(self) -> None:
        self.stopped = True

    def window(self, t0: float, t1: float) -> tuple:
        """``(ops/s, p99 us)`` over ops that finished in ``[t0, t1)``."""
        n, lats = self.recorder.window(t0, t1)
        return n / max(t1 - t0, 1e-9), percentiles(lats, (99,))[0]


def _ltc_util(cluster, prev: dict, now: float) -> dict:
    out = {}
    for name, ltc in list(cluster.ltcs.items()):
        busy = ltc.cpu.busy_time
        t0, b0 = prev.get(name, (now, busy))
        dt = now - t0
        out[name] = 0.0 if dt <= 0 else min(1.0, (busy - b0) / (dt * ltc.cpu.lanes))
        prev[name] = (now, busy)
    return out


def run_workload(spec: WorkloadSpec, cluster, verify: bool = False, controller=None,
                 tick: float = 0.1, active: int | None = None) -> RunMetrics:
    """Drive ``spec`` against ``cluster`` and collect metrics.

    ``controller(handle)`` runs every ``tick`` seconds; it may pause
    clients, reshape the cluster or stop the run. ``active`` limits how many
    clients start issuing ops (the controller can raise it later). With ``verify`` every
    acknowledged op is replayed into an :class:`Oracle` and mismatches are
    listed in ``RunMetrics.mismatches``.
    """
    spec.validate()
    if getattr(cluster.runtime, "simulated", False):
        metrics = _run_sim(spec, cluster, verify, controller, tick, active)
    else:
        metrics = _run_threads(spec, cluster, verify, controller, tick, active)
    if metrics.total_ops == 0 and metrics.errors:
        raise ClusterUnavailable(f"all {metrics.errors} ops failed")
    return metrics


def _run_sim(spec, cluster, verify, controller, tick, active) -> RunMetrics:
    rt = cluster.runtime
    start = rt.now()
    rec = Recorder(start)
    handle = RunHandle(cluster, spec, rec, start)
    if active is not None:
        handle.set_active(active)
    deadline = start + spec.duration if spec.duration > 0 else math.inf
    gens = [OpGenerator(spec, i) for i in range(spec.client_threads)]
    clients = [cluster.client(f"client-{i}") for i in range(spec.client_threads)]
    oracle = Oracle() if verify else None
    pace = None if spec.rate is None else 1.0 / spec.rate

    def step(i: int) -> None:
        if handle.stopped:
            return
        if i >= handle.active:
            rt.spawn(lambda: step(i), tick)
            return
        if spec.ops and handle.issued >= spec.ops:
            handle.stop()
            return
        handle.issued += 1
        t0 = rt.now()
        op = gens[i].next()
        try:
            ok, result = execute_op(clients[i], op)
        except Exception as exc:  # a bug, not an outage: end the run
            handle.failure = exc
            handle.stop()
            return
        t1 = rt.now()
        rec.record(op[0], t0, t1, ok)
        if oracle is not None:
            problem = oracle.observe(op, ok, result)
            if problem:
                rec.mismatch(problem)
        rt.spawn_at(t1 if pace is None else max(t1, t0 + pace), lambda: step(i))

    util_prev: dict = {}

    def on_tick() -> None:
        if handle.stopped:
            return
        now = rt.now()
        rec.sample(now, cluster.backlog(), len(cluster.ltcs), _ltc_util(cluster, util_prev, now))
        if controller is not None:
            controller(handle)
        rt.spawn(on_tick, tick)

    _ltc_util(cluster, util_prev, start)
    for i in range(spec.client_threads):
        rt.spawn_at(start + i * 1e-6, lambda i=i: step(i))
    rt.spawn(on_tick, tick)
    while not handle.stopped and rt.now() < deadline:
        rt.run_until(min(rt.now() + 1.0, deadline))
    handle.stop()
    if handle.failure is not None:
        raise handle.failure
    end = min(rt.now(), deadline)
    if spec.ops and handle.issued >= spec.ops and rec.count():
        end = min(end, rec.last_end())
    metrics = rec.finish(end)
    metrics.oracle_checks = oracle.checked if oracle else 0
    return metrics


def _run_threads(spec, cluster, verify, controller, tick, active) -> RunMetrics:
    start = time.monotonic()
    rec = Recorder(start)
    handle = RunHandle(cluster, spec, rec, start)
    if active is not None:
        handle.set_active(active)
    deadline = start + spec.duration if spec.duration > 0 else math.inf
    n = spec.client_threads
    lock = threading.Lock()
    checked = []

    def client_loop(i: int) -> None:
        # disjoint key sets keep per-thread oracles exact
        gen = OpGenerator(spec, i, partition=(i, n) if verify and n > 1 else None)
        client = cluster.client()
        oracle = Oracle() if verify else None
        pace = None if spec.rate is None else 1.0 / spec.rate
        while not handle.stopped and time.monotonic() < deadline:
            if i >= handle.active:
                time.sleep(tick)
                continue
            with lock:
                if spec.ops and handle.issued >= spec.ops:
                    handle.stop()
                    break
                handle.issued += 1
            t0 = time.monotonic()
            op = gen.next()
            ok, result = execute_op(client, op)
            t1 = time.monotonic()
            rec.record(op[0], t0, t1, ok)
            if oracle is not None:
                problem = oracle.observe(op, ok, result)
                if problem:
                    rec.mismatch(problem)
            if pace is not None and t0 + pace > t1:
                time.sleep(t0 + pace - t1)
        if oracle is not None:
            checked.append(oracle.checked)

    threads = [threading.Thread(target=client_loop, args=(i,), daemon=True, name=f"bench-client-{i}")
               for i in range(n)]
    for t in threads:
        t.start()
    util_prev: dict = {}
    _ltc_util(cluster, util_prev, start)
    while any(t.is_alive() for t in threads):
        time.sleep(tick)
        now = time.monotonic()
        rec.sample(now, cluster.backlog(), len(cluster.ltcs), _ltc_util(cluster, util_prev, now))
        if controller is not None and not handle.stopped:
            controller(handle)
        if now >= deadline:
            handle.stop()
    for t in threads:
        t.join()
    metrics = rec.finish(min(time.monotonic(), deadline))
    metrics.oracle_checks = sum(checked)
    return metrics


# elasticity


@dataclass
class Plateau:
    ltcs: int
    throughput: float
    p99_us: float
    t0: float
    t1: float
    phase: str


@dataclass
class Migration:
    action: str  # add | remove
    ltc: str
    time: float
    moves: int
    placements_before: dict
    placements_after: dict
    stored_before: dict
    stored_after: dict

    @property
    def moved_data(self) -> bool:
        return self.placements_before != self.placements_after or self.stored_before != self.stored_after


@dataclass
class ElasticityResult:
    metrics: RunMetrics
    plateaus: list = field(default_factory=list)
    migrations: list = field(default_factory=list)
    unloaded_p99_us: float = 0.0

    def rising(self) -> list:
        return [p for p in self.plateaus if p.phase == "rise"]

    def falling(self) -> list:
        return [p for p in self.plateaus if p.phase == "fall"]


def elasticity_config(max_ltcs: int = 3, stocs: int = 4, seed: int = 0, **overrides) -> ClusterConfig:
    """Desk-scale cluster where one LTC's CPU is the bottleneck."""
    base = dict(
        n_ltcs=1, n_stocs=stocs, n_workers=2, n_ranges=12, seed=seed,
        ltc_op_cost_us=500.0, memtable_bytes=64 << 10, level_base_bytes=1 << 20,
        max_output_bytes=256 << 10, heartbeat_s=0.5, failure_detection=False,
    )
    base.update(overrides)
    return ClusterConfig(**base)


def elasticity_spec(clients: int = 48, seed: int = 0, **overrides) -> WorkloadSpec:
    # 50% writes, the mix the scenario's "sw50" label suggests
    base = dict(read_fraction=0.5, key_count=50_000, value_size_bytes=100, duration=600.0,
                client_threads=clients, seed=seed)
    base.update(overrides)
    return WorkloadSpec(**base)


def elasticity_scenario(start_ltcs: int = 1, max_ltcs: int = 3, stocs: int = 4, config: ClusterConfig | None = None,
                        spec: WorkloadSpec | None = None, calibrate_s: float = 5.0, sustain_s: int = 5,
                        plateau_s: int = 5, settle_s: int = 2, factor: float = 5.0, low_clients: int | None = None,
                        seed: int = 0) -> ElasticityResult:
    """Scale out one LTC at a time under saturation, then back in as load falls.

    A single client first measures unloaded p99. Load then jumps to every
    client; whenever per-second p99 stays above ``factor`` x unloaded for
    ``sustain_s`` seconds the scenario records a throughput plateau and adds
    an LTC, up to ``max_ltcs``. Afterwards the client count steps down
    towards ``low_clients`` while LTCs are removed one at a time, recording
    a plateau after each removal.
    """
    config = config or elasticity_config(max_ltcs, stocs, seed, n_ltcs=start_ltcs)
    config = dataclasses.replace(config, n_ltcs=start_ltcs)
    spec = spec or elasticity_spec(seed=seed)
    high = spec.client_threads
    low = low_clients or max(1, high // 3)
    cluster = DevCluster(config)
    result = ElasticityResult(RunMetrics())
    removals = max(0, max_ltcs - 1)

    def migrate(h: RunHandle, action: str) -> None:
        pb, sb = cluster.placements(), cluster.stored_objects()
        t = h.now()
        moves_before = len(cluster.coordinator.migrations)
        name = cluster.add_ltc() if action == "add" else cluster.remove_ltc()
        moves = len(cluster.coordinator.migrations) - moves_before
        result.migrations.append(Migration(action, name, t, moves, pb, cluster.placements(),
                                           sb, cluster.stored_objects()))
        h.recorder.event(t, f"{action} {name} ({moves} ranges moved)")

    def plateau(h: RunHandle, phase: str, seconds: int) -> None:
        now = h.now()
        tput, p99 = h.window(now - seconds, now)
        result.plateaus.append(Plateau(len(cluster.ltcs), tput, p99, now - seconds, now, phase))

    def controller(h: RunHandle) -> None:
        st = h.state
        now = h.now()
        sec = int(math.floor(now - h.start + 1e-9))
        if st.get("sec") == sec:
            return
        st["sec"] = sec
        phase = st.setdefault("phase", "calibrate")
        if phase == "calibrate":
            h.set_active(1)
            if now - h.start >= calibrate_s:
                _, result.unloaded_p99_us = h.window(h.start + 1.0, now)
                h.set_active(high)
                st.update(phase="rise", since=now, hot=0)
            return
        if now - st["since"] < settle_s:
            return
        if phase == "rise":
            _, p99 = h.window(now - 1.0, now)
            st["hot"] = st["hot"] + 1 if p99 > factor * result.unloaded_p99_us else 0
            at_max = len(cluster.ltcs) >= max_ltcs
            if (not at_max and st["hot"] >= sustain_s) or (at_max and now - st["since"] >= settle_s + plateau_s):
                plateau(h, "rise", sustain_s if not at_max else plateau_s)
                if at_max:
                    st.update(phase="fall", since=now, left=removals)
                    _step_down(h, st)
                else:
                    migrate(h, "add")
                    st.update(since=now, hot=0)
            return
        if phase == "fall" and now - st["since"] >= settle_s + plateau_s:
            plateau(h, "fall", plateau_s)
            if st["left"] <= 0:
                h.stop()
                return
            _step_down(h, st)
            st["since"] = now

    def _step_down(h: RunHandle, st: dict) -> None:
        st["left"] -= 1
        frac = (removals - st["left"]) / max(1, removals)
        h.set_active(round(high - (high - low) * frac))
        migrate(h, "remove")

    if removals == 0:
        def controller_single(h):  # nothing to scale; measure one plateau
            if h.now() - h.start >= calibrate_s + plateau_s:
                plateau(h, "rise", plateau_s)
                h.stop()
        metrics = run_workload(spec, cluster, controller=controller_single, active=1)
    else:
        metrics = run_workload(spec, cluster, controller=controller, active=1)
    result.metrics = metrics
    cluster.shutdown()
    return result


# compaction offload


@dataclass
class OffloadResult:
    workers: int
    metrics: RunMetrics
    mean_backlog: float
    put_p99_us: float
    jobs_done: int


def offload_config(workers: int, seed: int = 0, **overrides) -> ClusterConfig:
    base = dict(
        n_ltcs=1, n_stocs=4, n_workers=workers, n_ranges=8, seed=seed, compaction_mode="remote",
        memtable_bytes=64 << 10, l0_trigger=4, level_base_bytes=1 << 20, max_output_bytes=512 << 10,
        ltc_op_cost_us=20.0, worker_cost_per_byte_ns=400.0, max_jobs_per_range=2,
        failure_detection=False,
    )
    base.update(overrides)
    return ClusterConfig(**base)


def offload_spec(seed: int = 0, **overrides) -> WorkloadSpec:
    base = dict(read_fraction=0.1, key_count=200_000, value_size_bytes=200, duration=60.0,
                client_threads=8, rate=250.0, seed=seed)
    base.update(overrides)
    return WorkloadSpec(**base)


def offload_run(workers: int, config: ClusterConfig | None = None, spec: WorkloadSpec | None = None,
                window_s: float = 30.0, seed: int = 0) -> OffloadResult:
    """Write-heavy load with remote-only compaction; backlog over the final window."""
    config = config or offload_config(workers, seed)
    spec = spec or offload_spec(seed)
    cluster = DevCluster(config)
    metrics = run_workload(spec, cluster)
    t1 = metrics.end
    t0 = t1 - window_s
    result = OffloadResult(
        workers, metrics, metrics.mean_backlog(t0, t1),
        metrics.latency_percentiles(WRITE, t0, t1)[2],
        sum(w.jobs_done for w in cluster.workers.values()),
    )
    cluster.shutdown()
    return result


# power-of-d placement


@dataclass
class PlacementResult:
    d: int
    flushes: int
    slow_stoc: str
    to_slow: int

    @property
    def fraction(self) -> float:
        return self.to_slow / self.flushes if self.flushes else 0.0


def placement_experiment(d: int, flushes: int = 1000, n_stocs: int = 8, slow_latency_us: float = 10_000.0,
                         slow_index: int | None = None, puts_per_flush: int = 4, seed: int = 0) -> PlacementResult:
    """Count flushes that land on one deliberately slow StoC.

    One LTC owns a single range and flushes a tiny memtable ``flushes``
    times; placement sees the StoC statistics piggybacked on earlier
    replies, exactly as in normal operation.
    """
    config = ClusterConfig(n_ltcs=1, n_stocs=n_stocs, n_workers=0, n_ranges=1, d=d, seed=seed,
                           compaction_mode="off", failure_detection=False, gc_grace_s=0.0)
    cluster = DevCluster(config)
    slow = f"stoc-{n_stocs - 1 if slow_index is None else slow_index}"
    cluster.stocs[slow].config.inject_latency_us = slow_latency_us
    ltc = next(iter(cluster.ltcs.values()))
    client = cluster.client()
    gen = OpGenerator(WorkloadSpec(read_fraction=0.0, key_count=1 << 30, value_size_bytes=64, seed=seed))
    for _ in range(flushes):
        for _ in range(puts_per_flush):
            _, key, value = gen.next()
            client.put(key, value)
        ltc.flush_range(0)
    placed = ltc.flush_placements[-flushes:]
    cluster.shutdown()
    return PlacementResult(d, len(placed), slow, sum(1 for a in placed if a == slow))
