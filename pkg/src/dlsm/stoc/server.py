"""Storage component: immutable objects, append-only logs, load stats.

The StoC never parses object contents; reads are raw offset/length slices.
Every response carries a ``"_s"`` field with the current
``[outstanding, ewma_latency_us, bytes_stored, object_count]`` so callers
get fresh load signals without polling.
"""

from __future__ import annotations

import bisect
import logging
import random
import threading
import zlib
from dataclasses import dataclass

from dlsm.errors import AlreadyExists, Crashed, DlsmError, OutOfSpace, StaleEpoch, UnknownOpcode
from dlsm.faults import FaultPoints
from dlsm.ids import ObjectId
from dlsm.stoc.backing import DiskBacking, MemoryBacking
from dlsm.transport.frame import Frame, Op, pack, unpack
from dlsm.transport.service import Service

logger = logging.getLogger(__name__)

EWMA_ALPHA = 0.2
STATS_KEY = "_s"

# ops fenced by the per-range epoch (writes only; reads are open to anyone)
_FENCED = {int(Op.PUT_OBJECT), int(Op.DELETE_OBJECT), int(Op.APPEND_LOG), int(Op.TRUNCATE_LOG)}


@dataclass
class StoCStats:
    outstanding_requests: int = 0
    ewma_latency_us: float = 0.0
    bytes_stored: int = 0
    object_count: int = 0

    def to_wire(self) -> list:
        return [self.outstanding_requests, round(self.ewma_latency_us, 3), self.bytes_stored, self.object_count]

    @classmethod
    def from_wire(cls, v) -> "StoCStats":
        return cls(int(v[0]), float(v[1]), int(v[2]), int(v[3]))

    @property
    def load_key(self) -> tuple:
        return (self.outstanding_requests, self.ewma_latency_us)


@dataclass
class StoCConfig:
    tier: str = "mem"
    directory: str | None = None
    inject_latency_us: float = 0.0
    inject_jitter_us: float = 0.0
    service_time_us: float = 5.0
    bytes_per_us: float = 2000.0  # ~2 GB/s media bandwidth
    lanes: int = 8
    capacity_bytes: int | None = None
    fsync: bool = True
    seed: int = 0


class StoC(Service):
    name = "stoc"

    def __init__(self, runtime, config: StoCConfig | None = None, name: str = "stoc"):
        super().__init__()
        self.name = name
        self.runtime = runtime
        self.config = config or StoCConfig()
        self.faults = FaultPoints()
        self.alive = True
        self._rng = random.Random(self.config.seed)
        self._resource = runtime.resource(self.config.lanes, name)
        self._lock = threading.Lock()
        self._inflight_ends: list[float] = []  # simulator: completion times still in the future
        self._outstanding = 0
        self._ewma_us = 0.0
        self._bytes = 0
        self._count = 0
        self.backing = self._open_backing()
        for op, fn in {
            Op.PUT_OBJECT: self._put_object,
            Op.GET_OBJECT: self._get_object,
            Op.DELETE_OBJECT: self._delete_object,
            Op.LIST_OBJECTS: self._list_objects,
            Op.STAT_OBJECT: self._stat_object,
            Op.APPEND_LOG: self._append_log,
            Op.READ_LOG: self._read_log,
            Op.TRUNCATE_LOG: self._truncate_log,
            Op.STOC_STATS: lambda args, frame: {},
        }.items():
            self.route(op, fn)

    def _open_backing(self):
        if self.config.tier == "disk":
            if not self.config.directory:
                raise DlsmError("disk tier needs a directory")
            backing = DiskBacking(self.config.directory, fsync=self.config.fsync)
        elif self.config.tier == "mem":
            backing = MemoryBacking()
        else:
            raise DlsmError(f"unknown tier {self.config.tier!r}")
        listing = backing.list()
        self._bytes = sum(n for _, n in listing)
        self._count = len(listing)
        return backing

    def restart(self) -> None:
        """Come back after a crash. Memory tier starts empty by design."""
        self.backing.close()
        with self._lock:
            self._inflight_ends.clear()
            self._outstanding = 0
        self.backing = self._open_backing()
        self.alive = True

    def close(self) -> None:
        self.backing.close()

    # stats
    def stats(self) -> StoCStats:
        return self._snapshot()

    def _snapshot(self, exclude_self: bool = False) -> StoCStats:
        with self._lock:
            if self.runtime.simulated:
                now = self.runtime.now()
                # events run out of clock order, so count rather than pop;
                # only ends far in the past are dropped
                ends = self._inflight_ends
                outstanding = len(ends) - bisect.bisect_right(ends, now)
                del ends[:bisect.bisect_right(ends, now - 1.0)]
            else:
                outstanding = max(0, self._outstanding - int(exclude_self))
            return StoCStats(outstanding, self._ewma_us, self._bytes, self._count)

    def _cost(self, kind: int, args) -> float:
        cfg = self.config
        nbytes = 0
        if isinstance(args, dict):
            if kind == Op.PUT_OBJECT or kind == Op.APPEND_LOG:
                nbytes = len(args.get("data") or b"")
            elif kind == Op.GET_OBJECT:
                nbytes = int(args.get("len") or 0)
        return (cfg.service_time_us + nbytes / cfg.bytes_per_us) * 1e-6

    def handle(self, frame: Frame) -> Frame:
        if not self.alive:
            raise Crashed(f"{self.name} is down")
        fn = self._handlers.get(frame.kind)
        if fn is None:
            return frame.error(UnknownOpcode(f"{self.name} does not serve opcode {frame.kind:#06x}"))
        rt = self.runtime
        arrival = rt.now()
        try:
            args = unpack(frame.payload)
        except Exception as exc:
            return frame.error(DlsmError(f"bad payload: {exc}"))
        with self._lock:
            self._outstanding += 1
        try:
            cfg = self.config
            if cfg.inject_latency_us or cfg.inject_jitter_us:
                extra = cfg.inject_latency_us
                if cfg.inject_jitter_us:
                    extra += self._rng.expovariate(1.0 / cfg.inject_jitter_us)
                rt.sleep(extra * 1e-6)
            self._resource.occupy(self._cost(frame.kind, args))
            with self._lock:
                latency_us = (rt.now() - arrival) * 1e6
                self._ewma_us = latency_us if self._ewma_us == 0 else (
                    EWMA_ALPHA * latency_us + (1 - EWMA_ALPHA) * self._ewma_us)
                if rt.simulated:
                    bisect.insort(self._inflight_ends, rt.now())
            try:
                if frame.epoch and (frame.kind in _FENCED or (
                        frame.kind == Op.STOC_STATS and isinstance(args, dict) and "range" in args)):
                    self._fence(args, frame.epoch)
                result = fn(args, frame)
            except Crashed:
                self.alive = False
                raise
            except DlsmError as exc:
                return frame.error(exc)
            except Exception as exc:
                logger.exception("%s: handler for %#06x failed", self.name, frame.kind)
                return frame.error(DlsmError(f"internal error: {exc!r}"))
            if result is None:
                result = {}
            result[STATS_KEY] = self._snapshot(exclude_self=True).to_wire()
            return frame.reply(pack(result))
        finally:
            with self._lock:
                self._outstanding -= 1

    def _fence(self, args, epoch: int) -> None:
        if "id" in args:
            range_id = args["id"][0]
        else:
            range_id = args["log"] if "log" in args else args["range"]
        with self._lock:
            seen = self.backing.epochs.get(range_id, 0)
            if epoch < seen:
                raise StaleEpoch(f"epoch {epoch} < {seen} for range {range_id}", range_id=range_id, seen=seen)
            if epoch > seen:
                self.backing.epochs[range_id] = epoch
                self.backing.save_epochs()

    # handlers
    def _put_object(self, args, frame):
        oid = ObjectId(*args["id"])
        data = bytes(args["data"])
        cap = self.config.capacity_bytes
        if cap is not None and self._bytes + len(data) > cap:
            raise OutOfSpace(f"{self.name}: {len(data)} bytes exceed remaining capacity")
        crc = zlib.crc32(data) & 0xFFFFFFFF
        try:
            self.backing.put(oid, data)
        except AlreadyExists:
            # a retried write of identical bytes (deterministic compaction output) is fine
            existing = self.backing.read(oid, 0, self.backing.size(oid))
            if existing != data:
                raise
            return {"id": list(oid), "crc": crc, "len": len(data), "dup": True}
        with self._lock:
            self._bytes += len(data)
            self._count += 1
        self.faults.hit("stoc.put_object.after_write")
        return {"id": list(oid), "crc": crc, "len": len(data)}

    def _get_object(self, args, frame):
        oid = ObjectId(*args["id"])
        offset = int(args.get("off", 0))
        length = args.get("len")
        if length is None:
            length = self.backing.size(oid) - offset
        return {"data": self.backing.read(oid, offset, int(length))}

    def _delete_object(self, args, frame):
        n = self.backing.delete(ObjectId(*args["id"]))
        with self._lock:
            self._bytes -= n
            self._count -= 1
        return {}

    def _list_objects(self, args, frame):
        range_id = args.get("range") if isinstance(args, dict) else None
        return {"objects": [[oid.range_id, oid.file_no, n] for oid, n in self.backing.list(range_id)]}

    def _stat_object(self, args, frame):
        oid = ObjectId(*args["id"])
        return {"id": list(oid), "len": self.backing.size(oid)}

    def _append_log(self, args, frame):
        data = bytes(args["data"])
        cap = self.config.capacity_bytes
        if cap is not None and self._bytes + len(data) > cap:
            raise OutOfSpace(f"{self.name}: log append exceeds capacity")
        lsn = self.backing.append(int(args["log"]), data)
        self.faults.hit("stoc.append_log.after_write")
        return {"lsn": lsn}

    def _read_log(self, args, frame):
        st = self.backing.log(int(args["log"]))
        with st.lock:
            first, records = st.read(int(args.get("from", 1)))
        return {"first_lsn": first, "records": records}

    def _truncate_log(self, args, frame):
        upto = int(args["upto"])
        st = self.backing.log(int(args["log"]))
        if upto > 0:
            self.backing.truncate(int(args["log"]), upto)
        return {"first_lsn": st.first_lsn}
