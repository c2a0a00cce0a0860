"""Pure compaction: merge SSTables, keep the newest version of each key."""

from __future__ import annotations

from dlsm.core.sstable import (
    DEFAULT_BITS_PER_KEY,
    DEFAULT_BLOCK_SIZE,
    SSTableBuilder,
    SSTableData,
)
from dlsm.errors import CorruptData
from dlsm.kernels import merge_entries

DEFAULT_MAX_OUTPUT_BYTES = 4 << 20


def compact(
    inputs,
    purge_tombstones: bool,
    max_output_bytes: int = DEFAULT_MAX_OUTPUT_BYTES,
    block_size: int = DEFAULT_BLOCK_SIZE,
    bits_per_key: int = DEFAULT_BITS_PER_KEY,
) -> list[SSTableData]:
    """Merge ``inputs`` into sorted, non-overlapping outputs.

    Only the highest-seq version of each key survives. Tombstones survive
    unless ``purge_tombstones`` (set only when the output lands on the bottom
    level). Each output encodes to at most ``max_output_bytes``, except that
    a single entry larger than the budget gets an output of its own. The
    result depends only on the arguments, so repeated runs encode to
    identical bytes.
    """
    if not inputs:
        raise CorruptData("compaction needs at least one input")
    runs = [s.entries for s in inputs]
    merged = merge_entries(runs, purge_tombstones)
    outputs = []
    builder = SSTableBuilder(block_size, bits_per_key)
    for entry in merged:
        if builder.entries and builder.size_with(entry) > max_output_bytes:
            outputs.append(builder.finish())
            builder = SSTableBuilder(block_size, bits_per_key)
        builder.add(entry)
    if builder.entries:
        outputs.append(builder.finish())
    return outputs
