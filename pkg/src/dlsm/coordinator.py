"""Range assignment and elasticity.

The planning functions (:func:`bootstrap`, :func:`plan_add_ltc`,
:func:`plan_remove_ltc`, :func:`route`) are pure and operate on an immutable
:class:`ClusterView`. :class:`Coordinator` wraps them in a service that runs
migrations (release on the old owner, adopt on the new one, then publish),
watches heartbeats and persists its state to a StoC object.
"""

from __future__ import annotations

import bisect
import logging
import math
import threading
from dataclasses import dataclass, field, replace

from dlsm.errors import AlreadyMember, DlsmError, InvalidConfig, LastLtc, TransportError, UnknownLtc
from dlsm.ids import COORDINATOR_RANGE, manifest_id
from dlsm.ltc.manifest import RangeDescriptor
from dlsm.stoc.client import StocClient
from dlsm.transport.frame import Op, pack, unpack
from dlsm.transport.service import Rpc, Service

logger = logging.getLogger(__name__)

LOAD_HALF_LIFE_S = 10.0
LOAD_MAX_AGE_S = 10.0
MAX_MISSED_HEARTBEATS = 3


@dataclass(frozen=True)
class LtcInfo:
    name: str
    addr: str
    alive: bool = True


@dataclass(frozen=True)
class ClusterView:
    version: int
    ltcs: tuple  # LtcInfo, sorted by name
    stocs: tuple
    ranges: tuple  # RangeDescriptor sorted by lower; epochs live in ``assignment``
    assignment: dict = field(default_factory=dict)  # range_id -> (ltc name, epoch)

    def ltc(self, name: str) -> LtcInfo | None:
        for info in self.ltcs:
            if info.name == name:
                return info
        return None

    def live_ltcs(self) -> list:
        return [i.name for i in self.ltcs if i.alive]

    def ranges_of(self, name: str) -> list:
        return sorted(r for r, (owner, _) in self.assignment.items() if owner == name)

    def counts(self) -> dict:
        out = {i.name: 0 for i in self.ltcs}
        for owner, _ in self.assignment.values():
            out[owner] = out.get(owner, 0) + 1
        return out

    def descriptor(self, range_id: int) -> RangeDescriptor:
        desc = next(r for r in self.ranges if r.range_id == range_id)
        return desc.with_epoch(self.assignment[range_id][1])

    def placement_key(self) -> list:
        return [(r, *self.assignment[r]) for r in sorted(self.assignment)]

    def to_wire(self) -> dict:
        return {
            "version": self.version,
            "ltcs": [[i.name, i.addr, i.alive] for i in self.ltcs],
            "stocs": list(self.stocs),
            "ranges": [[r.range_id, r.lower, r.upper] for r in self.ranges],
            "assignment": {str(k): list(v) for k, v in sorted(self.assignment.items())},
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ClusterView":
        return cls(
            d["version"],
            tuple(LtcInfo(n, a, bool(alive)) for n, a, alive in d["ltcs"]),
            tuple(d["stocs"]),
            tuple(RangeDescriptor(r, bytes(lo), None if hi is None else bytes(hi), 0)
                  for r, lo, hi in d["ranges"]),
            {int(k): (v[0], int(v[1])) for k, v in d["assignment"].items()},
        )


@dataclass(frozen=True)
class Move:
    range_id: int
    source: str | None
    target: str
    epoch: int  # epoch after the move


def bootstrap(n_ranges: int, ltcs, stocs) -> ClusterView:
    """Split the keyspace on 2-byte prefixes and deal ranges round-robin."""
    ltcs = list(ltcs)
    if not ltcs or n_ranges < len(ltcs):
        raise InvalidConfig(f"need n_ranges >= ltcs >= 1, got {n_ranges} ranges for {len(ltcs)} LTCs")
    if n_ranges > 1 << 16:
        raise InvalidConfig("at most 65536 ranges")
    names = []
    infos = []
    for item in ltcs:
        name, addr = item if isinstance(item, tuple) else (item, item)
        if name in names:
            raise InvalidConfig(f"duplicate LTC {name}")
        names.append(name)
        infos.append(LtcInfo(name, addr))
    bounds = [b""] + [((i << 16) // n_ranges).to_bytes(2, "big") for i in range(1, n_ranges)]
    ranges = tuple(
        RangeDescriptor(i, bounds[i], bounds[i + 1] if i + 1 < n_ranges else None, 0)
        for i in range(n_ranges)
    )
    assignment = {i: (names[i % len(names)], 1) for i in range(n_ranges)}
    return ClusterView(1, tuple(sorted(infos, key=lambda i: i.name)), tuple(stocs), ranges, assignment)


def route(view: ClusterView, key: bytes) -> tuple[int, str, str, int]:
    """``(range_id, ltc name, ltc addr, epoch)`` for the range holding ``key``."""
    lowers = [r.lower for r in view.ranges]
    i = bisect.bisect_right(lowers, key) - 1
    desc = view.ranges[max(i, 0)]
    owner, epoch = view.assignment[desc.range_id]
    info = view.ltc(owner)
    return desc.range_id, owner, info.addr if info else owner, epoch


def _hot_first(ranges, loads: dict) -> list:
    return sorted(ranges, key=lambda r: (-loads.get(r, 0.0), r))


def plan_add_ltc(view: ClusterView, name: str, addr: str | None = None, loads: dict | None = None):
    """Give ``name`` ranges until no LTC owns two more than it.

    Each step takes the hottest range (ties to the lowest id) from the LTCs
    that currently own the most, so every LTC ends within one range of
    the others. Without load reports this is plain count balancing.
    """
    if view.ltc(name) is not None and view.ltc(name).alive:
        raise AlreadyMember(f"{name} is already a member")
    loads = loads or {}
    infos = [i for i in view.ltcs if i.name != name] + [LtcInfo(name, addr or name)]
    assignment = dict(view.assignment)
    counts = {i.name: 0 for i in infos if i.alive}
    for owner, _ in assignment.values():
        if owner in counts:
            counts[owner] += 1
    moves = []
    # ranges whose owner is gone go first
    for r in sorted(assignment):
        owner, epoch = assignment[r]
        if owner not in counts:
            assignment[r] = (name, epoch + 1)
            counts[name] += 1
            moves.append(Move(r, None, name, epoch + 1))
    while True:
        top = max((c for n, c in counts.items() if n != name), default=0)
        if top < counts[name] + 2:
            break
        donors = [n for n, c in counts.items() if n != name and c == top]
        eligible = [r for r, (owner, _) in assignment.items() if owner in donors]
        if not eligible:
            break
        r = _hot_first(eligible, loads)[0]
        owner, epoch = assignment[r]
        assignment[r] = (name, epoch + 1)
        counts[owner] -= 1
        counts[name] += 1
        moves.append(Move(r, owner, name, epoch + 1))
    new = replace(view, version=view.version + 1, ltcs=tuple(sorted(infos, key=lambda i: i.name)),
                  assignment=assignment)
    return new, moves


def plan_remove_ltc(view: ClusterView, name: str, loads: dict | None = None, dead: bool = False):
    """Spread ``name``'s ranges over the survivors, hottest range to least-loaded survivor."""
    info = view.ltc(name)
    if info is None:
        raise UnknownLtc(f"{name} is not a member")
    survivors = [i.name for i in view.ltcs if i.alive and i.name != name]
    if not survivors:
        raise LastLtc(f"cannot remove {name}: it is the last live LTC")
    loads = loads or {}
    assignment = dict(view.assignment)
    count = {s: 0 for s in survivors}
    load = {s: 0.0 for s in survivors}
    for r, (owner, _) in assignment.items():
        if owner in count:
            count[owner] += 1
            load[owner] += loads.get(r, 0.0)
    moves = []
    for r in _hot_first(view.ranges_of(name), loads):
        target = min(survivors, key=lambda s: (load[s], count[s], s))
        _, epoch = assignment[r]
        assignment[r] = (target, epoch + 1)
        count[target] += 1
        load[target] += loads.get(r, 0.0)
        moves.append(Move(r, None if dead else name, target, epoch + 1))
    if dead:
        ltcs = tuple(replace(i, alive=False) if i.name == name else i for i in view.ltcs)
    else:
        ltcs = tuple(i for i in view.ltcs if i.name != name)
    new = replace(view, version=view.version + 1, ltcs=ltcs, assignment=assignment)
    return new, moves


@dataclass
class CoordinatorConfig:
    n_ranges: int = 64
    heartbeat_s: float = 0.5
    missed_heartbeats: int = MAX_MISSED_HEARTBEATS
    failure_detection: bool = True
    persist: bool = True
    rpc_timeout_s: float = 10.0


class Coordinator(Service):
    name = "coordinator"

    def __init__(self, runtime, transport, stocs: list, config: CoordinatorConfig | None = None,
                 name: str = "coordinator"):
        super().__init__()
        self.name = name
        self.runtime = runtime
        self.config = config or CoordinatorConfig()
        self.rpc = Rpc(transport, self.config.rpc_timeout_s)
        self.stocs = StocClient(self.rpc, runtime)
        self.stoc_addrs = list(stocs)
        self.view: ClusterView | None = None
        self.alive = True
        self._plan_lock = threading.RLock()
        self._loads: dict[int, tuple[float, float]] = {}  # range -> (ewma ops/s, last report time)
        self._heartbeats: dict[str, float] = {}
        self._incarnations: dict[str, int] = {}
        self._tried: dict[int, int] = {}  # range -> highest epoch ever offered
        self.unserved: dict[int, str] = {}  # range -> owner whose adoption failed
        self._state_loc = None
        self.migrations: list = []
        for op, fn in {
            Op.GET_VIEW: lambda a, f: self.view.to_wire(),
            Op.REPORT_LOAD: self._h_report,
            Op.HEARTBEAT: self._h_heartbeat,
            Op.ADD_LTC: lambda a, f: self._moves_wire(self.add_ltc(a["ltc"], a.get("addr"))),
            Op.REMOVE_LTC: lambda a, f: self._moves_wire(self.remove_ltc(a["ltc"])),
            Op.CLUSTER_STATUS: lambda a, f: self.cluster_status(),
        }.items():
            self.route(op, fn)

    # lifecycle
    def bootstrap(self, ltcs, n_ranges: int | None = None, adopt: bool = True) -> ClusterView:
        """Create the initial view and have every LTC adopt its ranges."""
        with self._plan_lock:
            view = bootstrap(n_ranges or self.config.n_ranges, ltcs, self.stoc_addrs)
            if adopt:
                for r in sorted(view.assignment):
                    owner, _ = view.assignment[r]
                    self._adopt(view, r, owner, None)
            self._publish(view)
            now = self.runtime.now()
            for info in view.ltcs:
                self._heartbeats[info.name] = now
        return view

    def start(self) -> "Coordinator":
        if self.config.heartbeat_s > 0:
            self.runtime.spawn(self._detector_loop, self.config.heartbeat_s)
        return self

    def recover(self) -> ClusterView | None:
        """Load the last persisted view from the StoCs."""
        found = []
        for addr in self.stoc_addrs:
            try:
                for oid, _ in self.stocs.list_objects(addr, COORDINATOR_RANGE):
                    found.append((oid.file_no, oid, addr))
            except (TransportError, DlsmError):
                continue
        for _, oid, addr in sorted(found, reverse=True):
            try:
                view = ClusterView.from_wire(unpack(self.stocs.get_object(addr, oid)))
            except (TransportError, DlsmError):
                continue
            self.view = view
            self._state_loc = (addr, oid)
            now = self.runtime.now()
            for info in view.ltcs:
                self._heartbeats[info.name] = now
            return view
        return None

    # state
    def _publish(self, view: ClusterView) -> None:
        if self.config.persist and self.stoc_addrs:
            oid = manifest_id(COORDINATOR_RANGE, 0, view.version)
            raw = pack(view.to_wire())
            for addr in self.stoc_addrs:
                try:
                    self.stocs.put_object(addr, oid, raw)
                    old, self._state_loc = self._state_loc, (addr, oid)
                    if old is not None and old[1] != oid:
                        try:
                            self.stocs.delete_object(*old)
                        except (TransportError, DlsmError):
                            pass
                    break
                except (TransportError, DlsmError) as exc:
                    logger.warning("coordinator state write to %s failed: %s", addr, exc)
        self.view = view
        logger.info("published view v%d: %s", view.version, view.counts())

    def loads(self) -> dict:
        now = self.runtime.now()
        return {r: v for r, (v, t) in self._loads.items() if now - t <= LOAD_MAX_AGE_S}

    def report_load(self, ltc: str, load: dict) -> None:
        info = self.view.ltc(ltc) if self.view else None
        if info is None:
            raise UnknownLtc(f"{ltc} is not a member")
        now = self.runtime.now()
        for r, rate in load.items():
            r = int(r)
            prev = self._loads.get(r)
            if prev is None or now - prev[1] > LOAD_MAX_AGE_S:
                self._loads[r] = (float(rate), now)
            else:
                alpha = 1.0 - math.exp(-(now - prev[1]) * math.log(2) / LOAD_HALF_LIFE_S)
                self._loads[r] = (prev[0] + alpha * (float(rate) - prev[0]), now)

    # migrations
    def _ltc_addr(self, view: ClusterView, name: str) -> str:
        info = view.ltc(name)
        return info.addr if info else name

    def _release(self, view: ClusterView, move: Move):
        try:
            resp = self.rpc.call(self._ltc_addr(view, move.source), Op.RELEASE_RANGE,
                                 {"range": move.range_id, "to": self._ltc_addr(view, move.target)})
            return resp["manifest"]
        except (TransportError, DlsmError) as exc:
            # the old owner is unreachable; the epoch bump fences it at every StoC
            logger.warning("release of range %d on %s failed: %s", move.range_id, move.source, exc)
            return None

    def _adopt(self, view: ClusterView, range_id: int, target: str, manifest, epoch: int | None = None) -> None:
        desc = view.descriptor(range_id)
        if epoch is not None:
            desc = desc.with_epoch(epoch)
        self._tried[range_id] = max(self._tried.get(range_id, 0), desc.epoch)
        self.rpc.call(self._ltc_addr(view, target), Op.ADOPT_RANGE,
                      {"desc": desc.to_wire(), "manifest": manifest})

    def _fresh_epoch(self, view: ClusterView, range_id: int, planned: int) -> int:
        # a failed adoption may already have fenced StoCs at the planned epoch
        return max(planned, self._tried.get(range_id, 0) + 1, view.assignment[range_id][1] + 1)

    def _execute(self, old: ClusterView, new: ClusterView, moves: list) -> None:
        """Run moves one at a time, publishing after each.

        A move whose adoption fails still takes effect in the view; the range
        is listed in ``unserved`` and :meth:`repair` retries it.
        """
        # while moves are in flight every LTC of either view stays addressable
        merged = {i.name: i for i in old.ltcs}
        merged.update({i.name: i for i in new.ltcs})
        ltcs = tuple(merged[n] for n in sorted(merged))
        view = old
        for move in moves:
            manifest = self._release(old, move) if move.source else None
            epoch = self._fresh_epoch(old, move.range_id, move.epoch)
            try:
                self._adopt(new, move.range_id, move.target, manifest, epoch)
                self.unserved.pop(move.range_id, None)
            except (TransportError, DlsmError) as exc:
                logger.warning("adoption of range %d on %s failed: %s", move.range_id, move.target, exc)
                self.unserved[move.range_id] = move.target
            assignment = dict(view.assignment)
            assignment[move.range_id] = (move.target, epoch)
            view = replace(new, version=view.version + 1, ltcs=ltcs, assignment=assignment)
            self._publish(view)
            self.migrations.append(replace(move, epoch=epoch))
        final = replace(new, version=view.version + 1, assignment=view.assignment)
        self._publish(final)

    def repair(self) -> list:
        """Retry adoptions that failed; returns the ranges now served."""
        fixed = []
        with self._plan_lock:
            for r, target in sorted(self.unserved.items()):
                view = self.view
                owner, _ = view.assignment[r]
                info = view.ltc(owner)
                if owner != target or info is None or not info.alive:
                    continue  # failover or a later move owns the problem now
                epoch = self._fresh_epoch(view, r, 0)
                try:
                    self._adopt(view, r, owner, None, epoch)
                except (TransportError, DlsmError) as exc:
                    logger.info("range %d still unserved: %s", r, exc)
                    continue
                del self.unserved[r]
                assignment = dict(view.assignment)
                assignment[r] = (owner, epoch)
                self._publish(replace(view, version=view.version + 1, assignment=assignment))
                fixed.append(r)
        return fixed

    def add_ltc(self, name: str, addr: str | None = None) -> list:
        with self._plan_lock:
            new, moves = plan_add_ltc(self.view, name, addr, self.loads())
            self._heartbeats[name] = self.runtime.now()
            self._execute(self.view, new, moves)
            return moves

    def remove_ltc(self, name: str) -> list:
        with self._plan_lock:
            new, moves = plan_remove_ltc(self.view, name, self.loads())
            self._execute(self.view, new, moves)
            self._heartbeats.pop(name, None)
            return moves

    def _failover(self, name: str) -> None:
        with self._plan_lock:
            info = self.view.ltc(name)
            if info is None or not info.alive:
                return
            try:
                new, moves = plan_remove_ltc(self.view, name, self.loads(), dead=True)
            except LastLtc:
                logger.error("%s is dead and no LTC is left to take its ranges", name)
                ltcs = tuple(replace(i, alive=False) if i.name == name else i for i in self.view.ltcs)
                self._publish(replace(self.view, version=self.view.version + 1, ltcs=ltcs))
                return
            logger.warning("%s missed heartbeats; moving %d ranges", name, len(moves))
            try:
                self._execute(self.view, new, moves)
            except (TransportError, DlsmError) as exc:
                logger.error("failover of %s incomplete: %s", name, exc)

    def _revive(self, name: str) -> None:
        """A dead LTC is back: mark it live and hand it any ranges nobody serves."""
        with self._plan_lock:
            view = self.view
            ltcs = tuple(replace(i, alive=True) if i.name == name else i for i in view.ltcs)
            live = {i.name for i in ltcs if i.alive}
            orphans = [r for r, (owner, _) in view.assignment.items() if owner not in live]
            base = replace(view, version=view.version + 1, ltcs=ltcs)
            if not orphans:
                self._publish(base)
                return
            assignment = dict(view.assignment)
            moves = []
            for r in sorted(orphans):
                epoch = assignment[r][1] + 1
                assignment[r] = (name, epoch)
                moves.append(Move(r, None, name, epoch))
            try:
                self._execute(base, replace(base, assignment=assignment), moves)
            except (TransportError, DlsmError) as exc:
                logger.error("re-adoption on %s failed: %s", name, exc)

    def _detector_loop(self) -> None:
        if not self.alive:
            return
        try:
            if self.config.failure_detection:
                self.check_failures()
            if self.unserved:
                self.repair()
        finally:
            self.runtime.spawn(self._detector_loop, self.config.heartbeat_s)

    def check_failures(self) -> list:
        if self.view is None:
            return []
        now = self.runtime.now()
        limit = self.config.heartbeat_s * self.config.missed_heartbeats
        dead = [i.name for i in self.view.ltcs
                if i.alive and now - self._heartbeats.get(i.name, now) > limit]
        for name in dead:
            self._failover(name)
        return dead

    def _readopt(self, name: str, inc: int) -> None:
        """A restarted LTC lost its memtables: re-adopt its ranges so they replay their logs."""
        with self._plan_lock:
            if self._incarnations.get(name) != inc or not self.alive:
                return
            view = self.view
            assignment = dict(view.assignment)
            moves = []
            for r in view.ranges_of(name):
                epoch = assignment[r][1] + 1
                assignment[r] = (name, epoch)
                moves.append(Move(r, None, name, epoch))
            if not moves:
                return
            logger.warning("%s restarted; re-adopting %d ranges", name, len(moves))
            try:
                self._execute(view, replace(view, assignment=assignment), moves)
            except (TransportError, DlsmError) as exc:
                logger.error("re-adoption on %s failed: %s", name, exc)

    def heartbeat(self, name: str, load: dict | None = None, inc: int | None = None) -> dict:
        view = self.view
        info = view.ltc(name) if view else None
        if info is None:
            return {"owned": None, "version": view.version if view else 0}
        self._heartbeats[name] = self.runtime.now()
        if not info.alive:
            self._revive(name)
            view = self.view
        if inc is not None and inc > self._incarnations.get(name, 0):
            self._incarnations[name] = inc
            self.runtime.spawn(lambda: self._readopt(name, inc))
        if load:
            self.report_load(name, load)
        owned = {str(r): e for r, (o, e) in view.assignment.items() if o == name}
        return {"owned": owned, "version": view.version}

    # status
    def cluster_status(self) -> dict:
        view = self.view
        out = {"view": view.to_wire(), "ltcs": {}, "stocs": {}}
        for info in view.ltcs:
            try:
                out["ltcs"][info.name] = self.rpc.call(info.addr, Op.LTC_STATUS, {}, timeout=2.0)
            except (TransportError, DlsmError) as exc:
                out["ltcs"][info.name] = {"error": str(exc)}
        for addr in view.stocs:
            try:
                st = self.stocs.stats(addr)
                out["stocs"][addr] = [st.outstanding_requests, st.ewma_latency_us, st.bytes_stored,
                                      st.object_count]
            except (TransportError, DlsmError) as exc:
                out["stocs"][addr] = {"error": str(exc)}
        return out

    # handlers
    def _moves_wire(self, moves) -> dict:
        return {"moves": [[m.range_id, m.source, m.target, m.epoch] for m in moves],
                "version": self.view.version}

    def _h_report(self, a, f):
        self.report_load(a["ltc"], a.get("load", {}))
        return {}

    def _h_heartbeat(self, a, f):
        return self.heartbeat(a["ltc"], a.get("load"), a.get("inc"))
