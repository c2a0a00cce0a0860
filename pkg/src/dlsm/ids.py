"""Object identifiers shared by LTCs, StoCs and compaction workers."""

from __future__ import annotations

from typing import NamedTuple

# file_no layout: [manifest:1][epoch:24][kind:1][counter:38]
MANIFEST_BIT = 1 << 63
_EPOCH_SHIFT = 39
_EPOCH_MASK = (1 << 24) - 1
COMPACTION_BIT = 1 << 38
_COUNTER_MASK = (1 << 38) - 1
JOB_OUTPUT_BITS = 12

COORDINATOR_RANGE = 0xFFFFFFFF


class ObjectId(NamedTuple):
    range_id: int
    file_no: int

    def __str__(self) -> str:
        return f"{self.range_id}-{self.file_no}"

    @classmethod
    def parse(cls, text: str) -> "ObjectId":
        r, f = text.split("-", 1)
        return cls(int(r), int(f))

    @property
    def is_manifest(self) -> bool:
        return bool(self.file_no & MANIFEST_BIT)

    @property
    def epoch(self) -> int:
        return (self.file_no >> _EPOCH_SHIFT) & _EPOCH_MASK

    @property
    def is_compaction_output(self) -> bool:
        return not self.is_manifest and bool(self.file_no & COMPACTION_BIT)

    @property
    def counter(self) -> int:
        return self.file_no & _COUNTER_MASK

    @property
    def job_seq(self) -> int:
        return (self.file_no & _COUNTER_MASK) >> JOB_OUTPUT_BITS


def flush_file_no(epoch: int, counter: int) -> int:
    return ((epoch & _EPOCH_MASK) << _EPOCH_SHIFT) | (counter & _COUNTER_MASK)


def compaction_output_id(range_id: int, epoch: int, job_seq: int, index: int) -> ObjectId:
    """Output ids depend only on (job, index), so a retried job rewrites the same ids."""
    if index >= 1 << JOB_OUTPUT_BITS:
        raise ValueError("too many compaction outputs")
    counter = (job_seq << JOB_OUTPUT_BITS) | index
    return ObjectId(range_id, ((epoch & _EPOCH_MASK) << _EPOCH_SHIFT) | COMPACTION_BIT | counter)


def manifest_id(range_id: int, epoch: int, version: int) -> ObjectId:
    """Manifest ids sort by (epoch, version), so a deposed owner never shadows its successor."""
    return ObjectId(range_id, MANIFEST_BIT | flush_file_no(epoch, version))


def manifest_version(oid: ObjectId) -> int:
    return oid.file_no & _COUNTER_MASK
