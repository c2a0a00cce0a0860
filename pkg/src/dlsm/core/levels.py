"""Level metadata and the leveled compaction policy."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from dlsm.errors import CorruptData
from dlsm.ids import ObjectId

NUM_LEVELS = 7
L0_TRIGGER = 4
SIZE_RATIO = 10


@dataclass(frozen=True)
class TableHandle:
    """Where an SSTable lives plus its footer summary."""

    object_id: ObjectId
    stoc: str
    size: int
    min_key: bytes
    max_key: bytes
    min_seq: int
    max_seq: int
    entry_count: int

    def overlaps(self, lo: bytes, hi: bytes) -> bool:
        return not (self.max_key < lo or self.min_key > hi)

    def to_dict(self) -> dict:
        return {
            "id": [self.object_id.range_id, self.object_id.file_no],
            "stoc": self.stoc,
            "size": self.size,
            "min_key": self.min_key,
            "max_key": self.max_key,
            "min_seq": self.min_seq,
            "max_seq": self.max_seq,
            "n": self.entry_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableHandle":
        return cls(
            ObjectId(*d["id"]),
            d["stoc"],
            d["size"],
            bytes(d["min_key"]),
            bytes(d["max_key"]),
            d["min_seq"],
            d["max_seq"],
            d["n"],
        )


@dataclass(frozen=True)
class LevelMetadata:
    """Immutable per-level table lists.

    Level 0 is ordered newest first (by max_seq) and may overlap. Levels 1+
    are sorted by min_key with disjoint key ranges.
    """

    levels: tuple = field(default_factory=lambda: tuple(() for _ in range(NUM_LEVELS)))

    def level(self, n: int) -> tuple:
        return self.levels[n]

    def all_tables(self):
        for lvl in self.levels:
            yield from lvl

    def live_ids(self) -> set:
        return {t.object_id for t in self.all_tables()}

    def level_bytes(self, n: int) -> int:
        return sum(t.size for t in self.levels[n])

    def deepest_nonempty(self) -> int:
        for n in range(len(self.levels) - 1, -1, -1):
            if self.levels[n]:
                return n
        return -1

    def add_l0(self, handle: TableHandle) -> "LevelMetadata":
        l0 = tuple(sorted(self.levels[0] + (handle,), key=lambda t: -t.max_seq))
        return replace(self, levels=(l0,) + self.levels[1:])

    def overlapping(self, n: int, lo: bytes, hi: bytes) -> list:
        return [t for t in self.levels[n] if t.overlaps(lo, hi)]

    def apply_edit(self, removed: set, target_level: int, added) -> "LevelMetadata":
        """Drop tables whose ids are in ``removed`` and add ``added`` at ``target_level``."""
        present = self.live_ids()
        missing = set(removed) - present
        if missing:
            raise CorruptData(f"edit removes unknown tables {sorted(missing)}")
        levels = [tuple(t for t in lvl if t.object_id not in removed) for lvl in self.levels]
        if target_level == 0:
            levels[0] = tuple(sorted(levels[0] + tuple(added), key=lambda t: -t.max_seq))
        else:
            levels[target_level] = tuple(
                sorted(levels[target_level] + tuple(added), key=lambda t: t.min_key)
            )
        out = replace(self, levels=tuple(levels))
        out.check()
        return out

    def check(self) -> None:
        """Raise CorruptData if a level >= 1 is unsorted or overlapping."""
        for n in range(1, len(self.levels)):
            lvl = self.levels[n]
            for a, b in zip(lvl, lvl[1:]):
                if not a.max_key < b.min_key:
                    raise CorruptData(f"level {n} tables overlap: {a.object_id} {b.object_id}")

    def to_list(self) -> list:
        return [[t.to_dict() for t in lvl] for lvl in self.levels]

    @classmethod
    def from_list(cls, data) -> "LevelMetadata":
        levels = [tuple(TableHandle.from_dict(d) for d in lvl) for lvl in data]
        while len(levels) < NUM_LEVELS:
            levels.append(())
        return cls(tuple(levels))


@dataclass(frozen=True)
class CompactionPolicy:
    l0_trigger: int = L0_TRIGGER
    size_ratio: int = SIZE_RATIO
    level_base_bytes: int = 16 << 20

    def target_bytes(self, level: int) -> int:
        return self.level_base_bytes * self.size_ratio ** (level - 1)

    def shape_violations(self, meta: LevelMetadata) -> list[int]:
        """Levels >= 1 whose size exceeds their target (soft invariant)."""
        return [
            n for n in range(1, NUM_LEVELS - 1)
            if meta.level_bytes(n) > self.target_bytes(n)
        ]


@dataclass(frozen=True)
class CompactionPick:
    inputs: tuple  # TableHandles, newest data first
    source_level: int
    target_level: int
    purge_tombstones: bool


def pick_compaction(
    meta: LevelMetadata,
    policy: CompactionPolicy,
    pending_ids=frozenset(),
    pending_targets=(),
    pointers=None,
) -> CompactionPick | None:
    """Choose the next compaction, or None.

    L0 compacts into L1 once it holds ``l0_trigger`` files; otherwise the
    level with the highest size/target score above 1 pushes one table into
    the next level. Tables in ``pending_ids`` are never picked twice, and a
    pick is skipped if any overlapping table in the target level is pending.
    ``pointers`` maps level -> last compacted max_key for round-robin choice.
    """
    pointers = pointers or {}
    pending_ids = set(pending_ids)

    def purge_for(target: int) -> bool:
        deepest = max([meta.deepest_nonempty(), *pending_targets])
        return target >= deepest

    l0 = meta.level(0)
    l0_busy = any(t.object_id in pending_ids for t in l0)
    if len(l0) >= policy.l0_trigger and not l0_busy:
        lo = min(t.min_key for t in l0)
        hi = max(t.max_key for t in l0)
        l1 = meta.overlapping(1, lo, hi)
        if not any(t.object_id in pending_ids for t in l1):
            return CompactionPick(tuple(l0) + tuple(l1), 0, 1, purge_for(1))

    scores = []
    for n in range(1, NUM_LEVELS - 1):
        score = meta.level_bytes(n) / policy.target_bytes(n)
        if score > 1.0:
            scores.append((-score, n))
    for _, n in sorted(scores):
        tables = meta.level(n)
        start = 0
        ptr = pointers.get(n)
        if ptr is not None:
            start = next((i for i, t in enumerate(tables) if t.min_key > ptr), 0)
        for i in list(range(start, len(tables))) + list(range(0, start)):
            t = tables[i]
            if t.object_id in pending_ids:
                continue
            below = meta.overlapping(n + 1, t.min_key, t.max_key)
            if any(b.object_id in pending_ids for b in below):
                continue
            return CompactionPick((t,) + tuple(below), n, n + 1, purge_for(n + 1))
    return None
