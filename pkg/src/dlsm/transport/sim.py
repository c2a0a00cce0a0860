"""Deterministic in-process network.

Every call still goes through the frame codec. Latency per directed edge is
``base + Exp(jitter)`` drawn from a seeded RNG; partitions and dead
endpoints fail calls with :class:`ConnectionFailed`.
"""

from __future__ import annotations

import logging
import random

from dlsm.errors import ConnectionFailed, Crashed, RealBackend, Timeout
from dlsm.transport.frame import Frame
from dlsm.transport.runtime import SimRuntime

logger = logging.getLogger(__name__)


class SimNetwork:
    def __init__(
        self,
        runtime: SimRuntime | None = None,
        seed: int = 0,
        base_latency: float = 20e-6,
        jitter: float = 5e-6,
    ):
        self.runtime = runtime or SimRuntime()
        self.rng = random.Random(seed)
        self.base_latency = base_latency
        self.jitter = jitter
        self.services: dict = {}
        self.dead: set = set()
        self._edges: dict = {}
        self._partitions: dict = {}
        self.depth = 0
        self.calls = 0

    def register(self, name: str, service) -> None:
        self.services[name] = service
        self.dead.discard(name)

    def unregister(self, name: str) -> None:
        self.services.pop(name, None)

    def kill(self, name: str) -> None:
        self.dead.add(name)
        svc = self.services.get(name)
        if svc is not None and hasattr(svc, "alive"):
            svc.alive = False

    def set_edge(self, a: str, b: str, base: float, jitter: float = 0.0) -> None:
        """Override latency on the directed edge a -> b."""
        self._edges[(a, b)] = (base, jitter)

    def latency(self, a: str, b: str) -> float:
        base, jitter = self._edges.get((a, b), (self.base_latency, self.jitter))
        if jitter > 0:
            return base + self.rng.expovariate(1.0 / jitter)
        return base

    def partition(self, a: str, b: str, duration: float) -> None:
        if duration <= 0:
            return
        key = frozenset((a, b))
        until = self.runtime.now() + duration
        self._partitions[key] = max(until, self._partitions.get(key, 0.0))

    def partitioned(self, a: str, b: str) -> bool:
        until = self._partitions.get(frozenset((a, b)))
        return until is not None and self.runtime.now() < until

    def transport(self, source: str) -> "SimTransport":
        return SimTransport(self, source)


class SimTransport:
    simulated = True

    def __init__(self, network: SimNetwork, source: str):
        self.network = network
        self.source = source

    def call(self, endpoint: str, frame: Frame, timeout: float | None = None) -> Frame:
        net = self.network
        rt = net.runtime
        raw = frame.encode()  # raises Oversize before anything is sent
        net.depth += 1
        try:
            start = rt.now()
            svc = net.services.get(endpoint)
            if svc is None or endpoint in net.dead or net.partitioned(self.source, endpoint):
                rt.sleep(net.latency(self.source, endpoint))
                raise ConnectionFailed(f"{self.source} -> {endpoint} unreachable")
            net.calls += 1
            rt.sleep(net.latency(self.source, endpoint))
            try:
                resp = svc.handle(Frame.decode(raw))
            except Crashed:
                net.kill(endpoint)
                raise ConnectionFailed(f"{endpoint} crashed while serving request")
            if endpoint in net.dead or net.partitioned(self.source, endpoint):
                raise ConnectionFailed(f"{endpoint} lost before reply")
            rt.sleep(net.latency(endpoint, self.source))
            resp = Frame.decode(resp.encode())
            if timeout is not None and rt.now() - start > timeout:
                raise Timeout(f"{endpoint} replied after {rt.now() - start:.6f}s")
            return resp
        finally:
            net.depth -= 1
            if net.depth == 0 and not rt.in_loop:
                rt.run_due()

    def sim_partition(self, a: str, b: str, duration: float) -> None:
        self.network.partition(a, b, duration)


def sim_partition(transport, a: str, b: str, duration: float) -> None:
    """Cut traffic between ``a`` and ``b`` for ``duration`` simulated seconds."""
    if not getattr(transport, "simulated", False):
        raise RealBackend("partitions can only be injected on the simulator")
    transport.network.partition(a, b, duration)
