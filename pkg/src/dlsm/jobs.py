"""Compaction job descriptors and the executor shared by workers and LTCs."""

from __future__ import annotations

import logging
import random
import zlib
from dataclasses import dataclass, field

from dlsm.core.compaction import DEFAULT_MAX_OUTPUT_BYTES, compact
from dlsm.core.levels import TableHandle
from dlsm.core.sstable import (
    DEFAULT_BITS_PER_KEY,
    DEFAULT_BLOCK_SIZE,
    SSTable,
    SSTableData,
    encode_sstable,
)
from dlsm.errors import (
    AlreadyExists,
    CorruptData,
    DlsmError,
    FetchFailed,
    StaleEpoch,
    TransportError,
    WriteFailed,
)
from dlsm.ids import compaction_output_id
from dlsm.placement import select_stoc_power_of_d

logger = logging.getLogger(__name__)


@dataclass
class CompactionJob:
    """Everything a stateless worker needs to run one compaction."""

    job_id: str
    range_id: int
    epoch: int
    job_seq: int
    inputs: list  # [TableHandle], newest data first
    target_level: int
    purge_tombstones: bool
    max_output_bytes: int = DEFAULT_MAX_OUTPUT_BYTES
    block_size: int = DEFAULT_BLOCK_SIZE
    bits_per_key: int = DEFAULT_BITS_PER_KEY
    output_policy: dict = field(default_factory=lambda: {"d": 2})  # or {"pinned": addr}
    stocs: list = field(default_factory=list)

    def __post_init__(self):
        if not self.inputs:
            raise CorruptData("compaction job without inputs")

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id,
            "range": self.range_id,
            "epoch": self.epoch,
            "seq": self.job_seq,
            "inputs": [t.to_dict() for t in self.inputs],
            "target": self.target_level,
            "purge": self.purge_tombstones,
            "max_out": self.max_output_bytes,
            "block": self.block_size,
            "bpk": self.bits_per_key,
            "policy": self.output_policy,
            "stocs": self.stocs,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "CompactionJob":
        return cls(
            d["job_id"], d["range"], d["epoch"], d["seq"],
            [TableHandle.from_dict(t) for t in d["inputs"]],
            d["target"], d["purge"], d["max_out"], d["block"], d["bpk"],
            dict(d["policy"]), list(d["stocs"]),
        )


@dataclass
class CompactionResult:
    job_id: str
    outputs: list  # [TableHandle]
    bytes_read: int = 0
    bytes_written: int = 0
    entries_dropped: int = 0
    duration: float = 0.0

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id,
            "outputs": [t.to_dict() for t in self.outputs],
            "stats": {
                "bytes_read": self.bytes_read,
                "bytes_written": self.bytes_written,
                "entries_dropped": self.entries_dropped,
                "duration": self.duration,
            },
        }

    @classmethod
    def from_wire(cls, d: dict) -> "CompactionResult":
        st = d["stats"]
        return cls(d["job_id"], [TableHandle.from_dict(t) for t in d["outputs"]],
                   st["bytes_read"], st["bytes_written"], st["entries_dropped"], st["duration"])


def fetch_table(stocs, handle: TableHandle) -> SSTable:
    """Read a whole input object and open it."""
    try:
        raw = stocs.get_object(handle.stoc, handle.object_id, 0, handle.size)
    except (TransportError, DlsmError) as exc:
        raise FetchFailed(f"cannot fetch {handle.object_id} from {handle.stoc}: {exc}",
                          id=list(handle.object_id)) from exc
    return SSTable.from_bytes(raw)


def execute_job(job: CompactionJob, stocs, runtime=None, cpu=None,
                cost_per_byte: float = 0.0, rng: random.Random | None = None) -> CompactionResult:
    """Fetch inputs, run :func:`compact`, store outputs, describe them.

    ``stocs`` is a :class:`~dlsm.stoc.client.StocClient`. When ``cpu`` is a
    runtime resource, the merge is charged ``cost_per_byte`` per input byte
    so simulated runs see realistic compaction time.
    """
    start = runtime.now() if runtime is not None else 0.0
    tables = [fetch_table(stocs, h) for h in job.inputs]
    bytes_read = sum(h.size for h in job.inputs)
    inputs = [t.entries() for t in tables]
    datas = [SSTableData(tuple(e), job.block_size, job.bits_per_key) for e in inputs]
    outputs = compact(datas, job.purge_tombstones, job.max_output_bytes, job.block_size, job.bits_per_key)
    if cpu is not None and cost_per_byte:
        cpu.occupy(bytes_read * cost_per_byte)
    rng = rng or random.Random(zlib.crc32(job.job_id.encode()))
    handles = []
    written = 0
    for i, data in enumerate(outputs):
        oid = compaction_output_id(job.range_id, job.epoch, job.job_seq, i)
        raw = encode_sstable(data)
        addr = _store_output(job, stocs, oid, raw, rng)
        written += len(raw)
        handles.append(TableHandle(oid, addr, len(raw), data.min_key, data.max_key,
                                   data.min_seq, data.max_seq, data.entry_count))
    in_entries = sum(len(e) for e in inputs)
    out_entries = sum(d.entry_count for d in outputs)
    duration = (runtime.now() - start) if runtime is not None else 0.0
    return CompactionResult(job.job_id, handles, bytes_read, written, in_entries - out_entries, duration)


def _store_output(job: CompactionJob, stocs, oid, raw: bytes, rng) -> str:
    pinned = job.output_policy.get("pinned")
    candidates = [pinned] if pinned else list(job.stocs)
    if not candidates:
        raise WriteFailed("job names no output StoCs")
    tried = set()
    last = None
    while len(tried) < len(candidates):
        left = [a for a in candidates if a not in tried]
        d = min(int(job.output_policy.get("d", 2)), len(left))
        addr = select_stoc_power_of_d([(a, stocs.cached_stats(a)) for a in left], d, rng)
        tried.add(addr)
        try:
            stocs.put_object(addr, oid, raw, epoch=job.epoch)
            return addr
        except AlreadyExists:
            # identical bytes are accepted by the StoC; different bytes mean a real conflict
            raise WriteFailed(f"{oid} already stored with different contents on {addr}") from None
        except StaleEpoch:
            raise
        except (TransportError, DlsmError) as exc:
            last = exc
            logger.warning("job %s: output %s to %s failed: %s", job.job_id, oid, addr, exc)
    raise WriteFailed(f"no StoC accepted output {oid}: {last}")
