"""Clocks, background tasks and contended resources.

Components never call ``time`` or ``threading`` directly; they go through a
runtime so the same code runs on real threads or inside the deterministic
simulator.

The simulator uses *activity time*: each event runs to completion
immediately, and ``now()`` advances as the activity sleeps, crosses the
network or waits for a :class:`SimResource` lane. Events are started in
virtual-time order, so resources see requests approximately first-come
first-served.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)


class SimResource:
    """``lanes`` identical servers; ``occupy`` queues for the first free one."""

    def __init__(self, runtime: "SimRuntime", lanes: int = 1, name: str = ""):
        self.runtime = runtime
        self.name = name
        self.lanes = max(1, lanes)
        self._free = [0.0] * self.lanes
        self.busy_time = 0.0
        self.ops = 0

    def occupy(self, cost: float) -> None:
        rt = self.runtime
        free = heapq.heappop(self._free)
        start = max(rt._now, free)
        end = start + max(0.0, cost)
        heapq.heappush(self._free, end)
        self.busy_time += end - start
        self.ops += 1
        rt._now = end

    def backlog(self) -> float:
        """Seconds of queued work beyond now on the least-busy lane."""
        return max(0.0, min(self._free) - self.runtime._now)


class SimRuntime:
    simulated = True

    def __init__(self):
        self._now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.in_loop = False
        self.events_run = 0

    def now(self) -> float:
        return self._now

    def sleep(self, dt: float) -> None:
        if dt > 0:
            self._now += dt

    def spawn(self, fn, delay: float = 0.0) -> None:
        heapq.heappush(self._heap, (self._now + max(0.0, delay), next(self._seq), fn))

    def spawn_at(self, when: float, fn) -> None:
        heapq.heappush(self._heap, (when, next(self._seq), fn))

    def resource(self, lanes: int = 1, name: str = "") -> SimResource:
        return SimResource(self, lanes, name)

    def pending_events(self) -> int:
        return len(self._heap)

    def run_until(self, t: float) -> None:
        """Run every event scheduled at or before ``t``; afterwards now() == t."""
        driver_time = self._now
        if self.in_loop:
            return
        self.in_loop = True
        try:
            while self._heap and self._heap[0][0] <= t:
                when, _, fn = heapq.heappop(self._heap)
                self._now = when
                self.events_run += 1
                try:
                    fn()
                except Exception:  # background tasks own their error handling
                    logger.exception("simulated event failed")
        finally:
            self.in_loop = False
            self._now = max(t, driver_time)

    def run_due(self) -> None:
        self.run_until(self._now)

    def run_for(self, dt: float) -> None:
        self.run_until(self._now + dt)


class RealResource:
    def __init__(self, lanes: int = 1, name: str = ""):
        self.name = name
        self.lanes = max(1, lanes)
        self._sem = threading.Semaphore(self.lanes)
        self._lock = threading.Lock()
        self.busy_time = 0.0
        self.ops = 0

    def occupy(self, cost: float) -> None:
        with self._sem:
            if cost > 0:
                time.sleep(cost)
            with self._lock:
                self.busy_time += max(0.0, cost)
                self.ops += 1

    def backlog(self) -> float:
        return 0.0


class RealRuntime:
    simulated = False
    in_loop = False

    def __init__(self, max_workers: int = 16):
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="dlsm")
        self._timers: set = set()
        self._closed = False
        self._lock = threading.Lock()

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)

    def _submit(self, fn) -> None:
        def run():
            try:
                fn()
            except Exception:
                logger.exception("background task failed")

        with self._lock:
            if not self._closed:
                self._pool.submit(run)

    def spawn(self, fn, delay: float = 0.0) -> None:
        if delay <= 0:
            self._submit(fn)
            return
        timer = threading.Timer(delay, lambda: (self._timers.discard(timer), self._submit(fn)))
        timer.daemon = True
        with self._lock:
            if self._closed:
                return
            self._timers.add(timer)
        timer.start()

    def spawn_at(self, when: float, fn) -> None:
        self.spawn(fn, when - self.now())

    def resource(self, lanes: int = 1, name: str = "") -> RealResource:
        return RealResource(lanes, name)

    def run_due(self) -> None:
        pass

    def run_for(self, dt: float) -> None:
        time.sleep(dt)

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
            timers = list(self._timers)
        for t in timers:
            t.cancel()
        self._pool.shutdown(wait=False, cancel_futures=True)
