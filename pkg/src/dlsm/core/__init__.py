"""Single-range LSM-tree mechanics with no networking."""

from dlsm.core.compaction import compact
from dlsm.core.levels import LevelMetadata, TableHandle
from dlsm.core.lookup import range_get, range_scan
from dlsm.core.memtable import Memtable
from dlsm.core.sstable import SSTable, SSTableData, decode_sstable, encode_sstable, sstable_get
from dlsm.core.types import MAX_KEY_LEN, MAX_VALUE_LEN, validate_key, validate_value

__all__ = [
    "MAX_KEY_LEN",
    "MAX_VALUE_LEN",
    "LevelMetadata",
    "Memtable",
    "SSTable",
    "SSTableData",
    "TableHandle",
    "compact",
    "decode_sstable",
    "encode_sstable",
    "range_get",
    "range_scan",
    "sstable_get",
    "validate_key",
    "validate_value",
]
