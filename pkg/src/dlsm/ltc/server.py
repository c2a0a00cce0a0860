"""LSM-tree component.

An LTC owns a set of key ranges. For each range it keeps a memtable, a list
of immutable memtables waiting to be flushed, and a manifest naming the
SSTables (and the StoC holding each one). Writes go to the range's log on
``log_replicas`` StoCs before they touch the memtable. Flushes place each new
SSTable on a StoC picked by power-of-d. Compactions are shipped to stateless
workers as self-contained jobs.

Ownership moves between LTCs without copying SSTables: the releasing LTC
hands over its manifest (and, for large memtables, the log position) and the
adopter replays the log tail.
"""

from __future__ import annotations

import logging
import random
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace

from dlsm.core.levels import CompactionPolicy, TableHandle, pick_compaction
from dlsm.core.lookup import lookup, range_scan
from dlsm.core.memtable import Memtable, memtable_flush
from dlsm.core.sstable import SSTable, encode_sstable
from dlsm.core.types import validate_key, validate_value
from dlsm.errors import (
    Busy,
    Crashed,
    DlsmError,
    EmptyMemtable,
    NotFound,
    NotOwner,
    RecoveryFailed,
    StaleEpoch,
    StorageRead,
    StorageWrite,
    TransportError,
    Unavailable,
    UnknownJob,
)
from dlsm.faults import FaultPoints
from dlsm.ids import ObjectId, flush_file_no, manifest_id
from dlsm.jobs import CompactionJob, CompactionResult, execute_job
from dlsm.ltc.manifest import RangeDescriptor, RangeManifest
from dlsm.placement import select_stoc_power_of_d
from dlsm.stoc.client import StocClient
from dlsm.transport.frame import Frame, Op, pack, unpack
from dlsm.transport.service import Rpc, Service

logger = logging.getLogger(__name__)


@dataclass
class LtcConfig:
    d: int = 2
    log_replicas: int = 1
    memtable_bytes: int = 4 << 20
    max_immutables: int = 2
    block_size: int = 4096
    bits_per_key: int = 10
    max_output_bytes: int = 4 << 20
    l0_trigger: int = 4
    size_ratio: int = 10
    level_base_bytes: int = 16 << 20
    compaction_mode: str = "remote"  # remote | local | off
    max_jobs_per_range: int = 2
    handoff_flush_bytes: int = 1 << 20
    op_cost_s: float = 0.0
    cpu_lanes: int = 1
    local_compaction_cost_per_byte: float = 0.0
    gc_grace_s: float = 1.0
    heartbeat_s: float = 0.5
    retry_s: float = 0.05
    table_cache: int = 1024
    block_cache_bytes: int = 16 << 20
    rpc_timeout_s: float = 10.0
    seed: int = 0


@dataclass
class _Immutable:
    mt: Memtable
    lsns: dict  # log replica -> highest LSN holding this memtable's records


@dataclass
class _Pending:
    job: CompactionJob
    source_level: int


class _Snapshot:
    """Frozen copy of memtable entries, usable wherever a memtable is read."""

    def __init__(self, entries):
        self._entries = entries  # sorted (key, seq, value)
        self._index = {e[0]: (e[1], e[2]) for e in entries}

    def get(self, key):
        return self._index.get(key)

    def iter_from(self, lower, upper=None):
        for e in self._entries:
            if e[0] >= lower and (upper is None or e[0] < upper):
                yield e


@dataclass
class RangeState:
    desc: RangeDescriptor
    manifest: RangeManifest
    log_replicas: list
    memtable: Memtable
    next_seq: int
    immutables: list = field(default_factory=list)
    mem_lsns: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)
    pointers: dict = field(default_factory=dict)
    inflight_ids: set = field(default_factory=set)
    gc_pending: set = field(default_factory=set)
    manifest_loc: tuple | None = None
    state: str = "serving"  # serving | releasing | gone
    flushing: bool = False
    ops: int = 0

    def __post_init__(self):
        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)

    @property
    def range_id(self) -> int:
        return self.desc.range_id

    @property
    def epoch(self) -> int:
        return self.desc.epoch

    def memtables(self) -> list:
        return [self.memtable] + [imm.mt for imm in reversed(self.immutables)]


class _BlockCache:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 0
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            val = self._data.get(key)
            if val is not None:
                self._data.move_to_end(key)
                self.hits += 1
            else:
                self.misses += 1
            return val

    def put(self, key, val: bytes) -> None:
        if len(val) > self.capacity:
            return
        with self._lock:
            if key in self._data:
                return
            self._data[key] = val
            self.size += len(val)
            while self.size > self.capacity:
                _, old = self._data.popitem(last=False)
                self.size -= len(old)


class Ltc(Service):
    def __init__(self, runtime, transport, stocs: list, config: LtcConfig | None = None,
                 name: str = "ltc", coordinator: str | None = None, workers: list | None = None,
                 address: str | None = None):
        super().__init__()
        self.name = name
        self.address = address or name
        self.runtime = runtime
        self.config = config or LtcConfig()
        self.rpc = Rpc(transport, self.config.rpc_timeout_s)
        self.stocs = StocClient(self.rpc, runtime)
        self.stoc_addrs = list(stocs)
        self.workers = list(workers or [])
        self.coordinator = coordinator
        self.policy = CompactionPolicy(self.config.l0_trigger, self.config.size_ratio,
                                       self.config.level_base_bytes)
        self.cpu = runtime.resource(self.config.cpu_lanes, name)
        self.faults = FaultPoints()
        self.on_crash: list = []
        self.alive = True
        self.incarnation = 0
        self._lock = threading.RLock()
        self._reset_state()
        for op, fn in {
            Op.PUT: self._h_put,
            Op.GET: self._h_get,
            Op.DELETE: self._h_delete,
            Op.SCAN: self._h_scan,
            Op.ADOPT_RANGE: self._h_adopt,
            Op.RELEASE_RANGE: self._h_release,
            Op.LTC_STATUS: lambda a, f: self.status(),
            Op.FLUSH: self._h_flush,
            Op.COMPACT: self._h_compact,
            Op.GC_SWEEP: lambda a, f: {"deleted": [[str(o), s] for o, s in self.gc_sweep()]},
            Op.PLACEMENTS: lambda a, f: {"placements": self.placements_wire()},
        }.items():
            self.route(op, fn)

    def _reset_state(self) -> None:
        self.ranges: dict[int, RangeState] = {}
        self.released: dict[int, tuple] = {}  # range_id -> (epoch, new owner hint)
        self.epochs_seen: dict[int, int] = {}
        self.rng = random.Random(self.config.seed)
        self.table_cache: OrderedDict = OrderedDict()
        self.block_cache = _BlockCache(self.config.block_cache_bytes)
        self._worker_inflight: dict[str, int] = {w: 0 for w in self.workers}
        self._worker_reported: dict[str, int] = {w: 0 for w in self.workers}
        self._worker_rr = 0
        self.flushes = 0
        self.flush_placements: list = []
        self.jobs_done = 0
        self.jobs_failed = 0
        self._last_load = (self.runtime.now(), {})

    # lifecycle
    def start(self) -> "Ltc":
        if self.coordinator and self.config.heartbeat_s > 0:
            inc = self.incarnation
            self.runtime.spawn(lambda: self._heartbeat_loop(inc))
        return self

    def crash(self) -> None:
        if not self.alive:
            return
        logger.warning("%s crashed", self.name)
        self.alive = False
        for fn in self.on_crash:
            fn(self)

    def restart(self) -> None:
        """Come back empty: ranges are re-adopted through the coordinator."""
        with self._lock:
            self.incarnation += 1
            self._reset_state()
            self.alive = True
        self.start()

    def _live(self, inc: int) -> bool:
        return self.alive and inc == self.incarnation

    def _background(self, fn, delay: float = 0.0) -> None:
        inc = self.incarnation

        def run():
            if not self._live(inc):
                return
            try:
                fn()
            except Crashed:
                self.crash()

        self.runtime.spawn(run, delay)

    def _then(self, fn) -> None:
        """Run ``fn`` at the current point of activity time.

        In the simulator this defers ``fn`` to a new event so its effects land
        when the global clock reaches now; on real threads it just runs.
        """
        if self.runtime.simulated:
            self._background(fn)
        else:
            fn()

    def handle(self, frame: Frame) -> Frame:
        if not self.alive:
            raise Crashed(f"{self.name} is down")
        try:
            return super().handle(frame)
        except Crashed:
            self.crash()
            raise

    # ownership
    def _hint(self, range_id: int | None = None):
        if range_id in self.released:
            return self.released[range_id][1] or self.coordinator
        return self.coordinator

    def _range_for(self, key: bytes, epoch: int = 0) -> RangeState:
        for rs in self.ranges.values():
            if rs.desc.contains(key):
                if rs.state != "serving":
                    raise NotOwner(f"range {rs.range_id} is being released", range_id=rs.range_id,
                                   hint=self._hint(range_id=rs.range_id))
                if epoch and epoch != rs.epoch:
                    if epoch < rs.epoch:
                        raise StaleEpoch(f"epoch {epoch} < {rs.epoch} for range {rs.range_id}",
                                         range_id=rs.range_id, seen=rs.epoch)
                    raise NotOwner(f"range {rs.range_id} at epoch {epoch} not adopted yet",
                                   range_id=rs.range_id, hint=self.coordinator)
                return rs
        raise NotOwner(f"{self.name} owns no range containing {key!r}", hint=self._hint())

    def _fenced(self, rs: RangeState) -> None:
        """A StoC saw a newer epoch: someone else owns this range now."""
        with rs.lock:
            if rs.state == "gone":
                return
            logger.warning("%s: range %d fenced at epoch %d", self.name, rs.range_id, rs.epoch)
            rs.state = "gone"
            rs.pending.clear()
        with self._lock:
            if self.ranges.get(rs.range_id) is rs:
                del self.ranges[rs.range_id]
                self.released[rs.range_id] = (rs.epoch, self.coordinator)

    # writes
    def put(self, key: bytes, value, epoch: int = 0) -> dict:
        key = validate_key(key)
        value = validate_value(value)
        rs = self._range_for(key, epoch)
        self.cpu.occupy(self.config.op_cost_s)
        flush = False
        with rs.lock:
            if rs.state != "serving":
                raise NotOwner(f"range {rs.range_id} released", hint=self._hint(range_id=rs.range_id))
            seq = rs.next_seq
            rs.next_seq += 1
            record = pack([seq, key, value])
            lsns = {}
            for addr in rs.log_replicas:
                try:
                    lsns[addr] = self.stocs.append_log(addr, rs.manifest.log_id, record, epoch=rs.epoch)
                except StaleEpoch:
                    self._fenced(rs)
                    raise NotOwner(f"range {rs.range_id} moved", hint=self.coordinator) from None
                except (TransportError, DlsmError) as exc:
                    raise Unavailable(f"log replica {addr} unavailable: {exc}") from None
            self.faults.hit("ltc.put.after_log")
            if not rs.memtable.fits(key, value):
                flush = self._rotate(rs)
            rs.memtable.put(key, seq, value)
            for addr, lsn in lsns.items():
                rs.mem_lsns[addr] = max(rs.mem_lsns.get(addr, 0), lsn)
            rs.ops += 1
            if len(rs.immutables) > self.config.max_immutables:
                self._stall(rs)
        if flush:
            self._background(lambda: self._flush_task(rs))
        return {"seq": seq, "durable": True}

    def delete(self, key: bytes, epoch: int = 0) -> dict:
        return self.put(key, None, epoch)

    def _rotate(self, rs: RangeState) -> bool:
        """Freeze the active memtable. Returns True if a flush should be started."""
        if not len(rs.memtable):
            return False
        rs.memtable.freeze()
        rs.immutables.append(_Immutable(rs.memtable, dict(rs.mem_lsns)))
        rs.memtable = Memtable(self.config.memtable_bytes)
        rs.mem_lsns = {}
        return True

    def _stall(self, rs: RangeState) -> None:
        """Too many unflushed memtables: flush inline before acknowledging."""
        while len(rs.immutables) > self.config.max_immutables and rs.state != "gone":
            if rs.flushing:
                rs.cond.wait(0.05)
                continue
            try:
                self._flush_pending(rs)
            except DlsmError as exc:
                logger.warning("%s: stalled flush of range %d failed: %s", self.name, rs.range_id, exc)
                return

    # flush
    def _flush_task(self, rs: RangeState) -> None:
        try:
            self._flush_pending(rs)
        except (DlsmError, TransportError) as exc:
            if rs.state == "serving" and rs.immutables:
                logger.warning("%s: flush of range %d failed (%s); retrying", self.name, rs.range_id, exc)
                self._background(lambda: self._flush_task(rs), self.config.retry_s)

    def _flush_pending(self, rs: RangeState) -> list:
        """Flush every immutable memtable of ``rs``, oldest first."""
        with rs.lock:
            if rs.flushing:
                return []
            rs.flushing = True
        out = []
        try:
            while True:
                with rs.lock:
                    if rs.state == "gone" or not rs.immutables:
                        break
                    imm = rs.immutables[0]
                out.append(self._flush_one(rs, imm))
        finally:
            with rs.lock:
                rs.flushing = False
                rs.cond.notify_all()
        self._maybe_compact(rs)
        return out

    def flush_range(self, range_id: int) -> list:
        """Rotate the active memtable and flush everything. Returns new ObjectIds."""
        rs = self.ranges.get(range_id)
        if rs is None or rs.state == "gone":
            raise NotOwner(f"range {range_id} not owned", hint=self._hint(range_id=range_id))
        with rs.lock:
            self._rotate(rs)
            if not rs.immutables and not rs.flushing:
                raise EmptyMemtable(f"range {range_id} has nothing to flush")
        while True:
            out = self._flush_pending(rs)
            with rs.lock:
                if not rs.flushing or rs.state == "gone":
                    return out
                rs.cond.wait(0.05)

    def _flush_one(self, rs: RangeState, imm: _Immutable) -> ObjectId:
        cfg = self.config
        data = memtable_flush(imm.mt, cfg.block_size, cfg.bits_per_key)
        raw = encode_sstable(data)
        with rs.lock:
            epoch = rs.epoch
            counter = rs.manifest.next_file
            rs.manifest = replace(rs.manifest, next_file=counter + 1)
            oid = ObjectId(rs.range_id, flush_file_no(epoch, counter))
            rs.inflight_ids.add(oid)
        try:
            addr = self._place(rs, oid, raw, epoch)
            self.faults.hit("ltc.flush.after_put_object")
            handle = TableHandle(oid, addr, len(raw), data.min_key, data.max_key,
                                 data.min_seq, data.max_seq, data.entry_count)
            with rs.lock:
                if rs.state == "gone" or rs.epoch != epoch:
                    raise NotOwner(f"range {rs.range_id} lost during flush")
                new = replace(rs.manifest, levels=rs.manifest.levels.add_l0(handle),
                              last_flushed_seq=max(rs.manifest.last_flushed_seq, imm.mt.last_seq))
                self._persist_manifest(rs, new)
                self.faults.hit("ltc.flush.after_manifest")
                rs.immutables.remove(imm)
                self.flushes += 1
                self.flush_placements.append(addr)
        finally:
            rs.inflight_ids.discard(oid)
        for log_addr, lsn in imm.lsns.items():
            try:
                self.stocs.truncate_log(log_addr, rs.manifest.log_id, lsn, epoch=epoch)
            except StaleEpoch:
                self._fenced(rs)
            except (TransportError, DlsmError) as exc:
                logger.info("%s: log truncate on %s failed: %s", self.name, log_addr, exc)
        return oid

    def _place(self, rs: RangeState, oid: ObjectId, raw: bytes, epoch: int) -> str:
        """put_object on a power-of-d StoC, retrying elsewhere on failure."""
        tried: set = set()
        last = None
        while len(tried) < len(self.stoc_addrs):
            left = [a for a in self.stoc_addrs if a not in tried]
            d = min(self.config.d, len(left))
            addr = select_stoc_power_of_d([(a, self.stocs.cached_stats(a)) for a in left], d, self.rng)
            tried.add(addr)
            try:
                self.stocs.put_object(addr, oid, raw, epoch=epoch)
                return addr
            except StaleEpoch:
                self._fenced(rs)
                raise NotOwner(f"range {rs.range_id} moved") from None
            except (TransportError, DlsmError) as exc:
                last = exc
                logger.info("%s: put %s on %s failed: %s", self.name, oid, addr, exc)
        raise StorageWrite(f"no StoC accepted {oid}: {last}")

    # manifests
    def _home(self, range_id: int) -> list:
        n = len(self.stoc_addrs)
        return [self.stoc_addrs[(range_id + i) % n] for i in range(n)]

    def _persist_manifest(self, rs: RangeState, new: RangeManifest) -> None:
        new = replace(new, epoch=rs.epoch, version=rs.manifest.version + 1)
        oid = manifest_id(rs.range_id, rs.epoch, new.version)
        raw = new.encode()
        stored = None
        for addr in self._home(rs.range_id):
            try:
                self.stocs.put_object(addr, oid, raw, epoch=rs.epoch)
                stored = addr
                break
            except StaleEpoch:
                self._fenced(rs)
                raise NotOwner(f"range {rs.range_id} moved") from None
            except (TransportError, DlsmError) as exc:
                logger.info("%s: manifest write to %s failed: %s", self.name, addr, exc)
        if stored is None:
            raise StorageWrite(f"could not persist manifest for range {rs.range_id}")
        old = rs.manifest_loc
        rs.manifest = new
        rs.manifest_loc = (stored, oid)
        if old is not None:
            # a handed-over manifest has no known location; look where it would have been written
            for addr in [old[0]] if old[0] is not None else self._home(rs.range_id):
                try:
                    self.stocs.delete_object(addr, old[1], epoch=rs.epoch)
                    break
                except (TransportError, DlsmError):
                    continue  # the orphan sweep collects leftovers

    def _discover_manifest(self, range_id: int):
        found = []
        for addr in self.stoc_addrs:
            try:
                for oid, _ in self.stocs.list_objects(addr, range_id):
                    if oid.is_manifest:
                        found.append((oid.file_no, oid, addr))
            except (TransportError, DlsmError):
                continue
        for _, oid, addr in sorted(found, reverse=True):
            try:
                return RangeManifest.decode(self.stocs.get_object(addr, oid)), (addr, oid)
            except (TransportError, DlsmError) as exc:
                logger.warning("%s: manifest %s on %s unreadable: %s", self.name, oid, addr, exc)
        return None, None

    # adopt / release
    def adopt_range(self, desc: RangeDescriptor, manifest: RangeManifest | None = None) -> dict:
        with self._lock:
            seen = self.epochs_seen.get(desc.range_id, 0)
            if desc.epoch <= seen:
                raise StaleEpoch(f"epoch {desc.epoch} <= {seen} for range {desc.range_id}",
                                 range_id=desc.range_id, seen=seen)
            self.epochs_seen[desc.range_id] = desc.epoch
            old = self.ranges.get(desc.range_id)
            if old is not None:
                old.state = "gone"
        for addr in self.stoc_addrs:
            try:
                self.stocs.fence(addr, desc.range_id, desc.epoch)
            except StaleEpoch as exc:
                raise StaleEpoch(f"a StoC has seen a newer epoch for range {desc.range_id}",
                                 range_id=desc.range_id, seen=exc.data.get("seen")) from None
            except (TransportError, DlsmError):
                pass
        loc = None
        if manifest is None:
            manifest, loc = self._discover_manifest(desc.range_id)
        if manifest is None:
            n = len(self.stoc_addrs)
            replicas = tuple(self.stoc_addrs[(desc.range_id + i) % n]
                             for i in range(min(self.config.log_replicas, n)))
            manifest = RangeManifest(desc.range_id, log_id=desc.range_id, log_replicas=replicas)
        elif manifest.version and loc is None:
            loc = (None, manifest_id(desc.range_id, manifest.epoch, manifest.version))
        replicas = list(manifest.log_replicas) or [self._home(desc.range_id)[0]]
        rs = RangeState(desc, manifest, replicas, Memtable(self.config.memtable_bytes),
                        manifest.last_flushed_seq + 1)
        rs.manifest_loc = loc
        replayed = self._replay(rs)
        with rs.lock:
            self._persist_manifest(rs, replace(rs.manifest, log_replicas=tuple(replicas)))
        with self._lock:
            if self.epochs_seen.get(desc.range_id) != desc.epoch:
                raise StaleEpoch(f"range {desc.range_id} adopted again meanwhile")
            self.ranges[desc.range_id] = rs
            self.released.pop(desc.range_id, None)
        if rs.immutables:
            self._background(lambda: self._flush_task(rs))
        self._background(lambda: self._maybe_compact(rs))
        logger.info("%s adopted range %d at epoch %d (%d records replayed)",
                    self.name, desc.range_id, desc.epoch, replayed)
        return {"replayed": replayed, "manifest_version": rs.manifest.version}

    def _replay(self, rs: RangeState) -> int:
        """Load log records newer than the manifest into fresh memtables."""
        floor = rs.manifest.last_flushed_seq
        by_seq: dict[int, tuple] = {}
        positions: dict[int, dict] = {}
        reachable = 0
        for addr in rs.log_replicas:
            try:
                first, records = self.stocs.read_log(addr, rs.manifest.log_id, 1)
            except NotFound:
                reachable += 1
                continue
            except (TransportError, DlsmError) as exc:
                logger.warning("%s: log replica %s unreadable: %s", self.name, addr, exc)
                continue
            reachable += 1
            for i, raw in enumerate(records):
                seq, key, value = unpack(raw)
                positions.setdefault(seq, {})[addr] = first + i
                if seq > floor:
                    by_seq[seq] = (bytes(key), None if value is None else bytes(value))
        if not reachable:
            raise RecoveryFailed(f"no log replica of range {rs.range_id} is reachable")
        max_seq = max([floor, *positions]) if positions else floor
        with rs.lock:
            for seq in sorted(by_seq):
                key, value = by_seq[seq]
                if not rs.memtable.fits(key, value):
                    self._rotate(rs)
                rs.memtable.put(key, seq, value)
                for addr, lsn in positions[seq].items():
                    rs.mem_lsns[addr] = max(rs.mem_lsns.get(addr, 0), lsn)
            rs.next_seq = max_seq + 1
        return len(by_seq)

    def release_range(self, range_id: int, new_owner: str | None = None) -> RangeManifest:
        rs = self.ranges.get(range_id)
        if rs is None or rs.state != "serving":
            raise NotOwner(f"range {range_id} not owned by {self.name}", hint=self._hint(range_id=range_id))
        with rs.lock:
            rs.state = "releasing"
            while rs.flushing:
                rs.cond.wait(0.05)
            unflushed = rs.memtable.approx_bytes + sum(i.mt.approx_bytes for i in rs.immutables)
            if unflushed < self.config.handoff_flush_bytes:
                self._rotate(rs)
                try:
                    rs.flushing = True
                    while rs.immutables:
                        self._flush_one(rs, rs.immutables[0])
                except (DlsmError, TransportError) as exc:
                    logger.warning("%s: handoff flush of range %d failed, handing off log: %s",
                                   self.name, range_id, exc)
                finally:
                    rs.flushing = False
            rs.state = "gone"
            rs.pending.clear()
            manifest = rs.manifest
        with self._lock:
            self.ranges.pop(range_id, None)
            self.released[range_id] = (rs.epoch, new_owner)
        logger.info("%s released range %d (manifest v%d)", self.name, range_id, manifest.version)
        return manifest

    # reads
    def _open_table(self, handle: TableHandle) -> SSTable:
        oid = handle.object_id
        with self._lock:
            table = self.table_cache.get(oid)
            if table is not None:
                self.table_cache.move_to_end(oid)
                return table
        cache = self.block_cache

        def fetch(offset, length):
            key = (oid, offset, length)
            hit = cache.get(key)
            if hit is None:
                try:
                    hit = self.stocs.get_object(handle.stoc, oid, offset, length)
                except (TransportError, DlsmError) as exc:
                    raise StorageRead(f"read of {oid} from {handle.stoc} failed: {exc}") from None
                cache.put(key, hit)
            return hit

        table = SSTable(fetch, handle.size)
        with self._lock:
            self.table_cache[oid] = table
            while len(self.table_cache) > self.config.table_cache:
                self.table_cache.popitem(last=False)
        return table

    def get(self, key: bytes, epoch: int = 0):
        """Value of ``key`` or None. Tombstones read as None."""
        key = validate_key(key)
        rs = self._range_for(key, epoch)
        self.cpu.occupy(self.config.op_cost_s)
        with rs.lock:
            for mt in rs.memtables():
                hit = mt.get(key)
                if hit is not None:
                    rs.ops += 1
                    return hit[1]
            levels = rs.manifest.levels
            rs.ops += 1
        hit = lookup(levels, [], key, self._open_table)
        return None if hit is None else hit[1]

    def scan(self, lower: bytes, upper: bytes | None, limit: int, epoch: int = 0) -> tuple[list, bytes | None]:
        """Live pairs in ``[lower, upper)`` within the range holding ``lower``.

        Returns ``(items, resume)``: ``resume`` is the range's upper bound when
        the scan stopped at the range edge, else None.
        """
        rs = self._range_for(lower, epoch)
        self.cpu.occupy(self.config.op_cost_s)
        hi = rs.desc.upper
        stop = upper if hi is None or (upper is not None and upper < hi) else hi
        with rs.lock:
            snaps = [_Snapshot(list(mt.iter_from(lower, stop))) for mt in rs.memtables()]
            levels = rs.manifest.levels
            rs.ops += 1
        items = range_scan(levels, snaps, lower, stop, limit, self._open_table)
        resume = None
        if len(items) < limit and stop is not None and stop != upper:
            resume = stop
        return items, resume

    # compaction
    def maybe_schedule_compaction(self, range_id: int, dispatch: bool = True):
        rs = self.ranges.get(range_id)
        if rs is None:
            raise NotOwner(f"range {range_id} not owned")
        jobs = self._maybe_compact(rs, dispatch)
        return jobs[0] if jobs else None

    def _make_job(self, rs: RangeState, inputs, source: int, target: int, purge: bool) -> CompactionJob:
        seq = rs.manifest.next_job
        rs.manifest = replace(rs.manifest, next_job=seq + 1)
        job = CompactionJob(
            f"{rs.range_id}:{rs.epoch}:{seq}", rs.range_id, rs.epoch, seq, list(inputs), target, purge,
            self.config.max_output_bytes, self.config.block_size, self.config.bits_per_key,
            {"d": self.config.d}, list(self.stoc_addrs),
        )
        rs.pending[job.job_id] = _Pending(job, source)
        return job

    def _maybe_compact(self, rs: RangeState, dispatch: bool = True) -> list:
        if self.config.compaction_mode == "off":
            return []
        jobs = []
        with rs.lock:
            while rs.state == "serving" and len(rs.pending) < self.config.max_jobs_per_range:
                busy = {t.object_id for p in rs.pending.values() for t in p.job.inputs}
                targets = [p.job.target_level for p in rs.pending.values()]
                pick = pick_compaction(rs.manifest.levels, self.policy, busy, targets, rs.pointers)
                if pick is None:
                    break
                if pick.source_level > 0:
                    rs.pointers[pick.source_level] = pick.inputs[0].max_key
                jobs.append(self._make_job(rs, pick.inputs, pick.source_level, pick.target_level,
                                           pick.purge_tombstones))
        if dispatch:
            for job in jobs:
                self._background(lambda job=job: self._run_job(rs, job))
        return jobs

    def compact_full(self, range_id: int) -> CompactionJob | None:
        """Merge every table of the range into its bottom level."""
        rs = self.ranges.get(range_id)
        if rs is None:
            raise NotOwner(f"range {range_id} not owned")
        with rs.lock:
            levels = rs.manifest.levels
            tables = list(levels.all_tables())
            if rs.pending or not tables:
                return None
            target = max(1, levels.deepest_nonempty())
            job = self._make_job(rs, tables, 0, target, True)
        self._background(lambda: self._run_job(rs, job))
        return job

    def _pick_worker(self, exclude: set) -> str | None:
        left = [w for w in self.workers if w not in exclude]
        if not left:
            return None
        self._worker_rr += 1
        order = left[self._worker_rr % len(left):] + left[:self._worker_rr % len(left)]
        return min(order, key=lambda w: self._worker_inflight.get(w, 0) + self._worker_reported.get(w, 0))

    def _run_job(self, rs: RangeState, job: CompactionJob) -> None:
        if rs.state != "serving" or job.job_id not in rs.pending:
            return
        try:
            if self.config.compaction_mode == "local" or not self.workers:
                result = execute_job(job, self.stocs, self.runtime, self.cpu,
                                     self.config.local_compaction_cost_per_byte)
            else:
                result = self._dispatch(job)
        except StaleEpoch:
            self._fenced(rs)
            return
        except (DlsmError, TransportError) as exc:
            self.jobs_failed += 1
            if rs.state == "serving" and job.job_id in rs.pending:
                logger.info("%s: job %s failed (%s); retrying", self.name, job.job_id, exc)
                self._background(lambda: self._run_job(rs, job), self.config.retry_s)
            return
        self._then(lambda: self._apply_quietly(rs, result))

    def _dispatch(self, job: CompactionJob) -> CompactionResult:
        tried: set = set()
        last = None
        wire = job.to_wire()
        while True:
            worker = self._pick_worker(tried)
            if worker is None:
                raise Busy(f"no worker accepted job {job.job_id}: {last}")
            tried.add(worker)
            self._worker_inflight[worker] = self._worker_inflight.get(worker, 0) + 1
            try:
                resp = self.rpc.call(worker, Op.EXECUTE_JOB, wire, epoch=job.epoch, timeout=None)
            except (Busy, TransportError) as exc:
                last = exc
                continue
            finally:
                self._worker_inflight[worker] -= 1
            self._worker_reported[worker] = int(resp.pop("_q", 0))
            return CompactionResult.from_wire(resp)

    def _apply_quietly(self, rs: RangeState, result: CompactionResult) -> None:
        try:
            self.apply_compaction_result(rs.range_id, result, rs)
        except (StaleEpoch, UnknownJob, NotOwner) as exc:
            logger.info("%s: result %s discarded: %s", self.name, result.job_id, exc)
        except (DlsmError, TransportError) as exc:
            logger.warning("%s: applying %s failed: %s", self.name, result.job_id, exc)

    def apply_compaction_result(self, range_id: int, result: CompactionResult, rs: RangeState | None = None) -> None:
        rs = rs or self.ranges.get(range_id)
        if rs is None or rs.state == "gone" or self.ranges.get(range_id) is not rs:
            self._delete_outputs(result, rs.epoch if rs else 0)
            raise StaleEpoch(f"range {range_id} no longer owned; outputs discarded")
        with rs.lock:
            pending = rs.pending.get(result.job_id)
            if pending is None:
                raise UnknownJob(f"no pending job {result.job_id}")
            job = pending.job
            if job.epoch != rs.epoch:
                del rs.pending[result.job_id]
                self._delete_outputs(result, rs.epoch)
                raise StaleEpoch(f"job {job.job_id} from epoch {job.epoch}")
            removed = {t.object_id for t in job.inputs}
            levels = rs.manifest.levels.apply_edit(removed, job.target_level, result.outputs)
            self._persist_manifest(rs, replace(rs.manifest, levels=levels))
            self.faults.hit("ltc.compaction.after_manifest")
            del rs.pending[result.job_id]
            self.jobs_done += 1
            doomed = [(t.stoc, t.object_id) for t in job.inputs]
            rs.gc_pending.update(doomed)
        self._background(lambda: self._delete_objects(rs, doomed), self.config.gc_grace_s)
        self._maybe_compact(rs)

    def _delete_outputs(self, result: CompactionResult, epoch: int) -> None:
        for t in result.outputs:
            try:
                self.stocs.delete_object(t.stoc, t.object_id, epoch=epoch)
            except (TransportError, DlsmError):
                pass

    def _delete_objects(self, rs: RangeState, doomed) -> None:
        for addr, oid in doomed:
            try:
                self.stocs.delete_object(addr, oid, epoch=rs.epoch)
            except (TransportError, DlsmError):
                pass
            rs.gc_pending.discard((addr, oid))

    def gc_sweep(self) -> list:
        """Delete objects of owned ranges that no manifest references."""
        deleted = []
        for rs in list(self.ranges.values()):
            with rs.lock:
                if rs.state != "serving" or rs.flushing:
                    continue
                live = {(t.stoc, t.object_id) for t in rs.manifest.levels.all_tables()}
                live |= rs.gc_pending
                keep_ids = set(rs.inflight_ids)
                if rs.manifest_loc is not None:
                    keep_ids.add(rs.manifest_loc[1])
                pending_seqs = {p.job.job_seq for p in rs.pending.values()}
                epoch = rs.epoch
            for addr in self.stoc_addrs:
                try:
                    listing = self.stocs.list_objects(addr, rs.range_id)
                except (TransportError, DlsmError):
                    continue
                for oid, _ in listing:
                    if (addr, oid) in live or oid in keep_ids:
                        continue
                    if oid.is_manifest:
                        if rs.manifest_loc and oid.file_no > rs.manifest_loc[1].file_no:
                            continue
                    elif oid.epoch >= epoch and (
                            (oid.is_compaction_output and oid.job_seq in pending_seqs)
                            or (not oid.is_compaction_output and oid.counter >= rs.manifest.next_file)):
                        continue
                    try:
                        self.stocs.delete_object(addr, oid, epoch=epoch)
                        deleted.append((oid, addr))
                    except StaleEpoch:
                        self._fenced(rs)
                        break
                    except (TransportError, DlsmError):
                        pass
        return deleted

    # introspection
    def placements(self) -> dict:
        out = {}
        for rs in list(self.ranges.values()):
            out.update(rs.manifest.placements())
        return out

    def placements_wire(self) -> list:
        return sorted([oid.range_id, oid.file_no, addr] for oid, addr in self.placements().items())

    def idle(self) -> bool:
        return all(not rs.pending and not rs.immutables and not rs.flushing for rs in self.ranges.values())

    def backlog(self) -> int:
        return sum(len(rs.pending) for rs in list(self.ranges.values()))

    def status(self) -> dict:
        ranges = []
        for rid in sorted(self.ranges):
            rs = self.ranges[rid]
            lv = rs.manifest.levels
            ranges.append({
                "id": rid,
                "epoch": rs.epoch,
                "lo": rs.desc.lower,
                "hi": rs.desc.upper,
                "mem_bytes": rs.memtable.approx_bytes,
                "immutables": len(rs.immutables),
                "tables": [len(lv.level(n)) for n in range(len(lv.levels))],
                "level_bytes": [lv.level_bytes(n) for n in range(len(lv.levels))],
                "pending_jobs": len(rs.pending),
                "last_flushed_seq": rs.manifest.last_flushed_seq,
                "manifest_version": rs.manifest.version,
            })
        return {
            "name": self.name,
            "ranges": ranges,
            "flushes": self.flushes,
            "jobs_done": self.jobs_done,
            "jobs_failed": self.jobs_failed,
            "backlog": self.backlog(),
            "cpu_busy": self.cpu.busy_time,
        }

    def load_report(self) -> dict:
        """Per-range ops/sec since the previous report."""
        now = self.runtime.now()
        then, prev = self._last_load
        counts = {rid: rs.ops for rid, rs in list(self.ranges.items())}
        dt = max(now - then, 1e-9)
        rates = {rid: (n - prev.get(rid, 0)) / dt for rid, n in counts.items()}
        self._last_load = (now, counts)
        return rates

    def _heartbeat_loop(self, inc: int) -> None:
        if not self._live(inc):
            return
        try:
            resp = self.rpc.call(self.coordinator, Op.HEARTBEAT, {
                "ltc": self.name, "addr": self.address, "inc": inc,
                "load": {str(k): v for k, v in self.load_report().items()},
                "ranges": {str(rid): rs.epoch for rid, rs in self.ranges.items()},
            }, timeout=self.config.heartbeat_s * 2)
            self._reconcile(resp.get("owned"))
        except (DlsmError, TransportError) as exc:
            logger.debug("%s: heartbeat failed: %s", self.name, exc)
        if self._live(inc):
            self.runtime.spawn(lambda: self._heartbeat_loop(inc), self.config.heartbeat_s)

    def _reconcile(self, owned) -> None:
        """Drop ranges the coordinator has given to someone else."""
        if owned is None:
            return
        owned = {int(k): v for k, v in owned.items()}
        for rid, rs in list(self.ranges.items()):
            if rid not in owned or owned[rid] > rs.epoch:
                self._fenced(rs)

    # wire handlers
    def _h_put(self, a, f):
        return self.put(bytes(a["k"]), None if a.get("v") is None else bytes(a["v"]), f.epoch)

    def _h_delete(self, a, f):
        return self.delete(bytes(a["k"]), f.epoch)

    def _h_get(self, a, f):
        v = self.get(bytes(a["k"]), f.epoch)
        return {"v": v, "found": v is not None}

    def _h_scan(self, a, f):
        hi = a.get("hi")
        items, resume = self.scan(bytes(a["lo"]), None if hi is None else bytes(hi), int(a.get("limit", 100)),
                                  f.epoch)
        return {"items": [[k, v] for k, v in items], "resume": resume}

    def _h_adopt(self, a, f):
        desc = RangeDescriptor.from_wire(a["desc"])
        manifest = RangeManifest.from_wire(a["manifest"]) if a.get("manifest") else None
        return self.adopt_range(desc, manifest)

    def _h_release(self, a, f):
        return {"manifest": self.release_range(int(a["range"]), a.get("to")).to_wire()}

    def _h_flush(self, a, f):
        rids = [a["range"]] if a.get("range") is not None else sorted(self.ranges)
        out = []
        for rid in rids:
            try:
                out.extend(str(o) for o in self.flush_range(rid))
            except EmptyMemtable:
                if a.get("range") is not None:
                    raise
        return {"flushed": out}

    def _h_compact(self, a, f):
        rids = [a["range"]] if a.get("range") is not None else sorted(self.ranges)
        jobs = []
        for rid in rids:
            job = self.compact_full(rid) if a.get("full") else self.maybe_schedule_compaction(rid)
            if job is not None:
                jobs.append(job.job_id)
        return {"jobs": jobs}
