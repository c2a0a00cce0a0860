"""Stateless compaction worker.

A worker accepts :class:`~dlsm.jobs.CompactionJob` requests, fetches the
input objects from StoCs, merges them, writes the outputs back and replies
with a :class:`~dlsm.jobs.CompactionResult`. It keeps nothing between jobs
except counters, so any worker can run (or re-run) any job.
"""

from __future__ import annotations

import bisect
import logging
import threading
from dataclasses import dataclass

from dlsm.errors import Busy, Crashed
from dlsm.faults import FaultPoints
from dlsm.jobs import CompactionJob, execute_job
from dlsm.stoc.client import StocClient
from dlsm.transport.frame import Frame, Op
from dlsm.transport.service import Rpc, Service

logger = logging.getLogger(__name__)


@dataclass
class WorkerConfig:
    max_concurrent: int = 1
    max_queue: int = 64
    cost_per_byte: float = 0.0  # simulated merge time per input byte
    rpc_timeout_s: float = 30.0


class Worker(Service):
    def __init__(self, runtime, transport, config: WorkerConfig | None = None, name: str = "worker"):
        super().__init__()
        self.name = name
        self.runtime = runtime
        self.config = config or WorkerConfig()
        self.stocs = StocClient(Rpc(transport, self.config.rpc_timeout_s), runtime)
        self.cpu = runtime.resource(self.config.max_concurrent, name)
        self.faults = FaultPoints()
        self.alive = True
        self._lock = threading.Lock()
        self._sem = threading.BoundedSemaphore(self.config.max_concurrent)
        self._admitted = 0
        self._sim_ends: list[float] = []
        self.jobs_done = 0
        self.jobs_failed = 0
        self.route(Op.EXECUTE_JOB, self._h_execute)
        self.route(Op.WORKER_STATUS, lambda a, f: self.status())

    def handle(self, frame: Frame) -> Frame:
        if not self.alive:
            raise Crashed(f"{self.name} is down")
        try:
            return super().handle(frame)
        except Crashed:
            self.alive = False
            raise

    def restart(self) -> None:
        with self._lock:
            self._admitted = 0
            self._sim_ends.clear()
        self.alive = True

    def queue_depth(self) -> int:
        """Jobs admitted and not yet finished."""
        with self._lock:
            if self.runtime.simulated:
                # count, don't pop: simulated events see out-of-order clocks
                now = self.runtime.now()
                ends = self._sim_ends
                depth = len(ends) - bisect.bisect_right(ends, now)
                del ends[:bisect.bisect_right(ends, now - 1.0)]
                return depth
            return self._admitted

    def execute(self, job: CompactionJob):
        limit = self.config.max_concurrent + self.config.max_queue
        if self.queue_depth() >= limit:
            raise Busy(f"{self.name} has {limit} jobs queued")
        with self._lock:
            self._admitted += 1
        try:
            if self.runtime.simulated:
                result = self._run(job)
                with self._lock:
                    bisect.insort(self._sim_ends, self.runtime.now())
                return result
            with self._sem:
                return self._run(job)
        finally:
            with self._lock:
                self._admitted -= 1

    def _run(self, job: CompactionJob):
        self.faults.hit("worker.before_execute")
        try:
            result = execute_job(job, self.stocs, self.runtime, self.cpu, self.config.cost_per_byte)
        except Exception:
            self.jobs_failed += 1
            raise
        self.faults.hit("worker.after_outputs")
        self.jobs_done += 1
        return result

    def status(self) -> dict:
        return {
            "name": self.name,
            "queue": self.queue_depth(),
            "jobs_done": self.jobs_done,
            "jobs_failed": self.jobs_failed,
            "busy": self.cpu.busy_time,
        }

    def _h_execute(self, args, frame):
        job = CompactionJob.from_wire(args)
        result = self.execute(job).to_wire()
        result["_q"] = self.queue_depth()
        return result
