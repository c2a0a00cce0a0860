"""Shared in-process cluster pieces for component tests."""

from dlsm.ltc.server import Ltc, LtcConfig
from dlsm.stoc.server import StoC, StoCConfig
from dlsm.transport.runtime import SimRuntime
from dlsm.transport.sim import SimNetwork
from dlsm.worker import Worker, WorkerConfig


class Rig:
    """StoCs, optional workers and hand-managed LTCs on one simulator."""

    def __init__(self, n_stocs=3, n_workers=0, seed=0, worker_config=None):
        self.rt = SimRuntime()
        self.net = SimNetwork(self.rt, seed)
        self.stocs = {}
        for i in range(n_stocs):
            name = f"stoc-{i}"
            self.stocs[name] = StoC(self.rt, StoCConfig(seed=i), name)
            self.net.register(name, self.stocs[name])
        self.workers = []
        for i in range(n_workers):
            name = f"worker-{i}"
            self.net.register(name, Worker(self.rt, self.net.transport(name), worker_config or WorkerConfig(), name))
            self.workers.append(name)

    def ltc(self, name="ltc-a", **cfg):
        cfg.setdefault("heartbeat_s", 0)
        cfg.setdefault("gc_grace_s", 0.1)
        ltc = Ltc(self.rt, self.net.transport(name), list(self.stocs), LtcConfig(**cfg), name,
                  None, self.workers)
        ltc.on_crash.append(lambda c: self.net.kill(c.name))
        self.net.register(name, ltc)
        return ltc

    def settle(self, dt=2.0):
        self.rt.run_for(dt)

    def stored(self, range_id=None):
        return {(name, oid) for name, s in self.stocs.items() for oid, _ in s.backing.list(range_id)
                if not oid.is_manifest}
