"""SSTable encoding, decoding and point/range reads.

Layout (little-endian)::

    [data blocks][bloom filter][block index][footer: 64 bytes]

See ``docs/formats.md`` for the byte-level description. Readers work over a
``fetch(offset, length) -> bytes`` callable so the same code serves local
buffers and remote objects read through a StoC.
"""

from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

from dlsm.errors import ChecksumMismatch, CorruptData
from dlsm.kernels import (
    block_find,
    bloom_build,
    bloom_may_contain,
    decode_block,
    encode_block,
    entry_size,
)

MAGIC = 0x4E4C534D
FORMAT_VERSION = 1
FOOTER = struct.Struct("<IHHQQQQQIIII")
FOOTER_SIZE = FOOTER.size
assert FOOTER_SIZE == 64
BLOOM_HEADER = struct.Struct("<HHI")
INDEX_ENTRY = struct.Struct("<QIH")
U16 = struct.Struct("<H")
U32 = struct.Struct("<I")
CRC_SIZE = 4

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_BITS_PER_KEY = 10


def _crc(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class SSTableData:
    """Decoded SSTable contents: entries sorted by (key asc, seq desc)."""

    entries: tuple
    block_size: int = DEFAULT_BLOCK_SIZE
    bits_per_key: int = DEFAULT_BITS_PER_KEY

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    @property
    def min_key(self) -> bytes:
        return self.entries[0][0]

    @property
    def max_key(self) -> bytes:
        return self.entries[-1][0]

    @property
    def min_seq(self) -> int:
        return min(e[1] for e in self.entries)

    @property
    def max_seq(self) -> int:
        return max(e[1] for e in self.entries)

    def validate(self) -> None:
        if not self.entries:
            raise CorruptData("an SSTable needs at least one entry")
        prev = None
        for entry in self.entries:
            if prev is not None:
                if entry[0] < prev[0] or (entry[0] == prev[0] and entry[1] >= prev[1]):
                    raise CorruptData(f"entries out of order at key {entry[0]!r}")
            prev = entry


class SSTableBuilder:
    """Accumulates sorted entries and tracks the exact encoded size."""

    def __init__(self, block_size: int = DEFAULT_BLOCK_SIZE, bits_per_key: int = DEFAULT_BITS_PER_KEY):
        self.block_size = block_size
        self.bits_per_key = bits_per_key
        self.entries: list = []
        self._blocks_bytes = 0
        self._index_bytes = 0
        self._cur_block = 0  # payload bytes in the open block, 0 if none open

    def _bloom_bytes(self, n: int) -> int:
        num_bits = max(64, n * self.bits_per_key)
        return BLOOM_HEADER.size + (num_bits + 7) // 8 + CRC_SIZE

    def size_with(self, entry) -> int:
        """Encoded size if ``entry`` were appended."""
        key, _, value = entry
        esz = entry_size(key, value)
        blocks = self._blocks_bytes
        index = self._index_bytes
        if self._cur_block and self._cur_block + esz + CRC_SIZE <= self.block_size:
            blocks += esz
        else:
            blocks += esz + CRC_SIZE
            index += INDEX_ENTRY.size + len(key)
        index_total = index + U16.size + len(key) + CRC_SIZE
        return blocks + self._bloom_bytes(len(self.entries) + 1) + index_total + FOOTER_SIZE

    def add(self, entry) -> None:
        key, _, value = entry
        esz = entry_size(key, value)
        if self._cur_block and self._cur_block + esz + CRC_SIZE <= self.block_size:
            self._cur_block += esz
            self._blocks_bytes += esz
        else:
            self._cur_block = esz
            self._blocks_bytes += esz + CRC_SIZE
            self._index_bytes += INDEX_ENTRY.size + len(key)
        self.entries.append(entry)

    def finish(self) -> SSTableData:
        return SSTableData(tuple(self.entries), self.block_size, self.bits_per_key)


def _split_blocks(entries, block_size: int):
    blocks = []
    start = 0
    cur = 0
    for i, (key, _, value) in enumerate(entries):
        esz = entry_size(key, value)
        if cur and cur + esz + CRC_SIZE > block_size:
            blocks.append((start, i))
            start = i
            cur = 0
        cur += esz
    blocks.append((start, len(entries)))
    return blocks


def encode_sstable(sst: SSTableData) -> bytes:
    sst.validate()
    entries = sst.entries
    out = bytearray()
    index = bytearray()
    block_ranges = _split_blocks(entries, sst.block_size)
    for start, end in block_ranges:
        payload = encode_block(entries[start:end])
        offset = len(out)
        out += payload
        out += U32.pack(_crc(payload))
        first_key = entries[start][0]
        index += INDEX_ENTRY.pack(offset, len(payload) + CRC_SIZE, len(first_key))
        index += first_key
    max_key = entries[-1][0]
    index += U16.pack(len(max_key)) + max_key
    index += U32.pack(_crc(index))

    bloom_offset = len(out)
    bits, num_bits, num_hashes = bloom_build([e[0] for e in entries], sst.bits_per_key)
    bloom = BLOOM_HEADER.pack(sst.bits_per_key, num_hashes, num_bits) + bits
    out += bloom
    out += U32.pack(_crc(bloom))

    index_offset = len(out)
    out += index
    seqs = [e[1] for e in entries]
    footer = FOOTER.pack(
        MAGIC,
        FORMAT_VERSION,
        0,
        len(entries),
        min(seqs),
        max(seqs),
        bloom_offset,
        index_offset,
        len(index),
        sst.block_size,
        len(block_ranges),
        0,
    )
    footer = footer[:-4] + U32.pack(_crc(footer[:-4]))
    out += footer
    return bytes(out)


@dataclass(frozen=True)
class Footer:
    entry_count: int
    min_seq: int
    max_seq: int
    bloom_offset: int
    index_offset: int
    index_len: int
    block_size: int
    block_count: int
    format_version: int = FORMAT_VERSION


def parse_footer(buf) -> Footer:
    if len(buf) != FOOTER_SIZE:
        raise CorruptData("footer must be 64 bytes")
    fields = FOOTER.unpack(buf)
    (magic, version, _, count, min_seq, max_seq, bloom_off, index_off, index_len,
     block_size, block_count, crc) = fields
    if magic != MAGIC:
        raise CorruptData(f"bad SSTable magic {magic:#x}")
    if crc != _crc(bytes(buf[:-4])):
        raise ChecksumMismatch("footer checksum mismatch")
    if version != FORMAT_VERSION:
        raise CorruptData(f"unsupported format version {version}")
    return Footer(count, min_seq, max_seq, bloom_off, index_off, index_len, block_size,
                  block_count, version)


@dataclass
class SSTable:
    """Reader over an encoded SSTable.

    ``fetch(offset, length)`` returns raw bytes of the encoded object. The
    constructor reads the footer, bloom filter and block index (two fetches);
    point lookups then cost at most one block fetch, and none when the bloom
    filter rejects the key. ``block_reads`` counts data-block fetches.
    """

    fetch: Callable[[int, int], bytes]
    size: int
    footer: Footer = field(init=False)
    block_reads: int = field(default=0, init=False)

    def __post_init__(self):
        if self.size < FOOTER_SIZE:
            raise CorruptData("object too small to be an SSTable")
        self.footer = parse_footer(self.fetch(self.size - FOOTER_SIZE, FOOTER_SIZE))
        f = self.footer
        if not f.bloom_offset <= f.index_offset <= self.size - FOOTER_SIZE:
            raise CorruptData("bad section offsets")
        if f.index_offset + f.index_len != self.size - FOOTER_SIZE:
            raise CorruptData("index does not end at footer")
        meta = bytes(self.fetch(f.bloom_offset, self.size - FOOTER_SIZE - f.bloom_offset))
        bloom = meta[: f.index_offset - f.bloom_offset]
        index = meta[f.index_offset - f.bloom_offset:]
        self._parse_bloom(bloom)
        self._parse_index(index)

    @classmethod
    def from_bytes(cls, buf) -> "SSTable":
        view = memoryview(bytes(buf))
        return cls(lambda off, n: view[off:off + n], len(view))

    def _parse_bloom(self, bloom: bytes) -> None:
        if len(bloom) < BLOOM_HEADER.size + CRC_SIZE:
            raise CorruptData("bloom section truncated")
        body, crc = bloom[:-CRC_SIZE], U32.unpack(bloom[-CRC_SIZE:])[0]
        if _crc(body) != crc:
            raise ChecksumMismatch("bloom checksum mismatch")
        self.bits_per_key, self.num_hashes, self.num_bits = BLOOM_HEADER.unpack_from(body)
        self.bloom_bits = body[BLOOM_HEADER.size:]
        if len(self.bloom_bits) * 8 != self.num_bits:
            raise CorruptData("bloom size mismatch")

    def _parse_index(self, index: bytes) -> None:
        body, crc = index[:-CRC_SIZE], U32.unpack(index[-CRC_SIZE:])[0]
        if _crc(body) != crc:
            raise ChecksumMismatch("index checksum mismatch")
        pos = 0
        self.first_keys: list[bytes] = []
        self.block_handles: list[tuple[int, int]] = []
        for _ in range(self.footer.block_count):
            offset, length, klen = INDEX_ENTRY.unpack_from(body, pos)
            pos += INDEX_ENTRY.size
            self.first_keys.append(body[pos:pos + klen])
            pos += klen
            self.block_handles.append((offset, length))
        (mlen,) = U16.unpack_from(body, pos)
        pos += U16.size
        self.max_key = body[pos:pos + mlen]
        if pos + mlen != len(body) or not self.first_keys:
            raise CorruptData("index trailing bytes")
        self.min_key = self.first_keys[0]

    def may_contain(self, key: bytes) -> bool:
        return bloom_may_contain(self.bloom_bits, self.num_bits, self.num_hashes, key)

    def read_block(self, i: int) -> bytes:
        offset, length = self.block_handles[i]
        raw = bytes(self.fetch(offset, length))
        self.block_reads += 1
        if len(raw) != length:
            raise CorruptData("short block read")
        payload, crc = raw[:-CRC_SIZE], U32.unpack(raw[-CRC_SIZE:])[0]
        if _crc(payload) != crc:
            raise ChecksumMismatch(f"block {i} checksum mismatch")
        return payload

    def get(self, key: bytes):
        """Return ``(seq, value)`` of the newest version of ``key`` or None."""
        if key < self.min_key or key > self.max_key:
            return None
        if not self.may_contain(key):
            return None
        i = max(0, bisect.bisect_left(self.first_keys, key) - 1)
        while i < len(self.first_keys) and self.first_keys[i] <= key:
            hit = block_find(self.read_block(i), key)
            if hit is not None:
                return (hit[1], hit[2])
            i += 1
        return None

    def iter_from(self, lower: bytes = b"", upper: bytes | None = None):
        """Yield entries with ``lower <= key < upper`` in order."""
        i = max(0, bisect.bisect_left(self.first_keys, lower) - 1)
        for b in range(i, len(self.first_keys)):
            if upper is not None and self.first_keys[b] >= upper:
                return
            for entry in decode_block(self.read_block(b)):
                if entry[0] < lower:
                    continue
                if upper is not None and entry[0] >= upper:
                    return
                yield entry

    def entries(self) -> list:
        out = []
        for b in range(len(self.first_keys)):
            out.extend(decode_block(self.read_block(b)))
        return out

    def summary(self) -> dict:
        f = self.footer
        return {
            "size": self.size,
            "min_key": self.min_key,
            "max_key": self.max_key,
            "min_seq": f.min_seq,
            "max_seq": f.max_seq,
            "entry_count": f.entry_count,
        }


def decode_sstable(buf) -> SSTableData:
    table = SSTable.from_bytes(buf)
    entries = table.entries()
    if len(entries) != table.footer.entry_count:
        raise CorruptData("entry count mismatch")
    data = SSTableData(tuple(entries), table.footer.block_size, table.bits_per_key)
    data.validate()
    if data.min_key != table.min_key or data.max_key != table.max_key:
        raise CorruptData("footer key bounds mismatch")
    return data


def sstable_get(sst, key: bytes):
    """Point lookup on an :class:`SSTable` reader or :class:`SSTableData`."""
    if isinstance(sst, SSTableData):
        sst = SSTable.from_bytes(encode_sstable(sst))
    return sst.get(key)
