"""Range descriptors and the per-range manifest persisted on StoCs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from dlsm.core.levels import LevelMetadata
from dlsm.errors import CorruptData
from dlsm.transport.frame import pack, unpack

MANIFEST_FORMAT = 1


@dataclass(frozen=True)
class RangeDescriptor:
    """Half-open key interval ``[lower, upper)``; ``upper=None`` means unbounded."""

    range_id: int
    lower: bytes
    upper: bytes | None
    epoch: int

    def contains(self, key: bytes) -> bool:
        return self.lower <= key and (self.upper is None or key < self.upper)

    def with_epoch(self, epoch: int) -> "RangeDescriptor":
        return replace(self, epoch=epoch)

    def to_wire(self) -> dict:
        return {"id": self.range_id, "lo": self.lower, "hi": self.upper, "epoch": self.epoch}

    @classmethod
    def from_wire(cls, d: dict) -> "RangeDescriptor":
        hi = d["hi"]
        return cls(d["id"], bytes(d["lo"]), bytes(hi) if hi is not None else None, d["epoch"])


@dataclass(frozen=True)
class RangeManifest:
    range_id: int
    epoch: int = 0
    version: int = 0
    last_flushed_seq: int = 0
    levels: LevelMetadata = field(default_factory=LevelMetadata)
    log_id: int = 0
    log_replicas: tuple = ()
    next_file: int = 1
    next_job: int = 1

    def to_wire(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "range": self.range_id,
            "epoch": self.epoch,
            "version": self.version,
            "last_flushed_seq": self.last_flushed_seq,
            "levels": self.levels.to_list(),
            "log_id": self.log_id,
            "log_replicas": list(self.log_replicas),
            "next_file": self.next_file,
            "next_job": self.next_job,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "RangeManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise CorruptData(f"unknown manifest format {d.get('format')!r}")
        return cls(
            d["range"], d["epoch"], d["version"], d["last_flushed_seq"],
            LevelMetadata.from_list(d["levels"]), d["log_id"], tuple(d["log_replicas"]),
            d["next_file"], d["next_job"],
        )

    def encode(self) -> bytes:
        return pack(self.to_wire())

    @classmethod
    def decode(cls, raw: bytes) -> "RangeManifest":
        return cls.from_wire(unpack(raw))

    def placements(self) -> dict:
        """``{ObjectId: stoc}`` for every live table."""
        return {t.object_id: t.stoc for t in self.levels.all_tables()}
