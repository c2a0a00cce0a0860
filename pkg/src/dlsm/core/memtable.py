"""In-memory write buffer."""

from __future__ import annotations

from sortedcontainers import SortedDict

from dlsm.errors import ImmutableMemtable, MemtableFull, SeqRegression
from dlsm.kernels import entry_size

DEFAULT_FLUSH_THRESHOLD = 4 << 20


class Memtable:
    """Ordered map ``key -> (seq, value)`` holding the newest version per key.

    While active, ``approx_bytes`` stays at or below ``flush_threshold``; an
    insert that would cross it raises :class:`MemtableFull` so the caller can
    rotate first. The one exception is the first entry of an empty memtable,
    which is always accepted.

    Not thread-safe: the owning range serializes writers.
    """

    def __init__(self, flush_threshold: int = DEFAULT_FLUSH_THRESHOLD):
        self.flush_threshold = flush_threshold
        self._entries: SortedDict = SortedDict()
        self.approx_bytes = 0
        self.immutable = False
        self.last_seq = 0
        self.min_seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def state(self) -> str:
        return "Immutable" if self.immutable else "Active"

    def fits(self, key: bytes, value) -> bool:
        if not self._entries:
            return True
        delta = entry_size(key, value)
        old = self._entries.get(key)
        if old is not None:
            delta -= entry_size(key, old[1])
        return self.approx_bytes + delta <= self.flush_threshold

    def put(self, key: bytes, seq: int, value) -> None:
        if self.immutable:
            raise ImmutableMemtable("memtable is immutable")
        if seq <= self.last_seq:
            raise SeqRegression(f"seq {seq} not greater than {self.last_seq}")
        if not self.fits(key, value):
            raise MemtableFull("insert would exceed flush threshold")
        old = self._entries.get(key)
        if old is not None:
            self.approx_bytes -= entry_size(key, old[1])
        self._entries[key] = (seq, value)
        self.approx_bytes += entry_size(key, value)
        if not self.min_seq:
            self.min_seq = seq
        self.last_seq = seq

    def get(self, key: bytes):
        """Return ``(seq, value)`` or None; value None means tombstone."""
        return self._entries.get(key)

    def freeze(self) -> None:
        self.immutable = True

    def entries(self):
        """Yield ``(key, seq, value)`` in key order."""
        for key, (seq, value) in self._entries.items():
            yield (key, seq, value)

    def iter_from(self, lower: bytes, upper: bytes | None = None):
        for key in self._entries.irange(minimum=lower, maximum=upper, inclusive=(True, False)):
            seq, value = self._entries[key]
            yield (key, seq, value)


def memtable_put(mt: Memtable, key: bytes, seq: int, value) -> Memtable:
    mt.put(key, seq, value)
    return mt


def memtable_flush(mt: Memtable, block_size: int = 4096, bits_per_key: int = 10):
    """Encode an immutable memtable as SSTable data (tombstones kept)."""
    from dlsm.core.sstable import SSTableData
    from dlsm.errors import EmptyMemtable

    if not mt.immutable:
        raise ImmutableMemtable("only immutable memtables can be flushed")
    if not len(mt):
        raise EmptyMemtable("nothing to flush")
    return SSTableData(tuple(mt.entries()), block_size=block_size, bits_per_key=bits_per_key)
