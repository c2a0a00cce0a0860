"""Reads across memtables and levels."""

from __future__ import annotations

import bisect
import heapq
from typing import Callable

from dlsm.core.levels import LevelMetadata, TableHandle
from dlsm.core.sstable import SSTable

TableOpener = Callable[[TableHandle], SSTable]


def _find_in_level(tables, key: bytes):
    lo = bisect.bisect_right([t.min_key for t in tables], key) - 1
    if lo >= 0 and tables[lo].max_key >= key:
        return tables[lo]
    return None


def lookup(levels: LevelMetadata, memtables, key: bytes, open_table: TableOpener):
    """Return ``(seq, value)`` of the newest version of ``key``, or None.

    ``memtables`` is ordered newest first. A tombstone comes back as
    ``(seq, None)``.
    """
    for mt in memtables:
        hit = mt.get(key)
        if hit is not None:
            return hit
    for t in levels.level(0):
        if t.min_key <= key <= t.max_key:
            hit = open_table(t).get(key)
            if hit is not None:
                return hit
    for n in range(1, len(levels.levels)):
        t = _find_in_level(levels.level(n), key)
        if t is not None:
            hit = open_table(t).get(key)
            if hit is not None:
                return hit
    return None


def range_get(levels: LevelMetadata, memtables, key: bytes, open_table: TableOpener):
    """Value of ``key``; None when absent or deleted."""
    hit = lookup(levels, memtables, key, open_table)
    if hit is None:
        return None
    return hit[1]


def range_scan(levels: LevelMetadata, memtables, lower: bytes, upper, limit: int,
               open_table: TableOpener) -> list:
    """Live ``(key, value)`` pairs with ``lower <= key < upper``, at most ``limit``."""
    sources = [mt.iter_from(lower, upper) for mt in memtables]
    for t in levels.level(0):
        if upper is None or t.min_key < upper:
            if t.max_key >= lower:
                sources.append(open_table(t).iter_from(lower, upper))
    for n in range(1, len(levels.levels)):
        tables = [t for t in levels.level(n)
                  if t.max_key >= lower and (upper is None or t.min_key < upper)]
        if tables:
            sources.append(_chain_level(tables, lower, upper, open_table))
    out = []
    last = None
    for key, _seq, value in heapq.merge(*sources, key=lambda e: (e[0], -e[1])):
        if key == last:
            continue
        last = key
        if value is None:
            continue
        out.append((key, value))
        if len(out) >= limit:
            break
    return out


def _chain_level(tables, lower, upper, open_table):
    for t in tables:
        yield from open_table(t).iter_from(lower, upper)
