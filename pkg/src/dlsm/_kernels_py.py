"""Pure-Python kernels.

Reference implementations of the hot loops. ``_ckernels.pyx`` must produce
bit-identical results; ``tests/test_kernels.py`` checks both against each
other and against frozen vectors.

Entries are ``(key, seq, value)`` tuples where ``value is None`` marks a
tombstone.
"""

from __future__ import annotations

import heapq
import struct

from dlsm.errors import CorruptData

BACKEND = "python"

_M32 = 0xFFFFFFFF
_C1 = 0xCC9E2D51
_C2 = 0x1B873593
BLOOM_SEED = 0xBC9F1D34

ENTRY_HEADER = struct.Struct("<HBQI")
ENTRY_HEADER_SIZE = ENTRY_HEADER.size  # 15
KIND_VALUE = 0
KIND_TOMBSTONE = 1


def murmur3_32(data: bytes, seed: int = 0) -> int:
    n = len(data)
    h = seed & _M32
    nblocks = n >> 2
    if nblocks:
        for k in struct.unpack_from("<%dI" % nblocks, data):
            k = (k * _C1) & _M32
            k = ((k << 15) | (k >> 17)) & _M32
            k = (k * _C2) & _M32
            h ^= k
            h = ((h << 13) | (h >> 19)) & _M32
            h = (h * 5 + 0xE6546B64) & _M32
    tail = nblocks << 2
    rem = n & 3
    if rem:
        k = 0
        if rem == 3:
            k ^= data[tail + 2] << 16
        if rem >= 2:
            k ^= data[tail + 1] << 8
        k ^= data[tail]
        k = (k * _C1) & _M32
        k = ((k << 15) | (k >> 17)) & _M32
        k = (k * _C2) & _M32
        h ^= k
    h ^= n
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & _M32
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & _M32
    h ^= h >> 16
    return h


def bloom_params(n_keys: int, bits_per_key: int) -> tuple[int, int]:
    """Return ``(num_bits, num_hashes)`` for a filter over ``n_keys`` keys."""
    num_bits = max(64, n_keys * bits_per_key)
    num_bits = ((num_bits + 7) // 8) * 8
    num_hashes = max(1, min(30, int(bits_per_key * 0.69)))
    return num_bits, num_hashes


def bloom_build(keys, bits_per_key: int) -> tuple[bytes, int, int]:
    num_bits, num_hashes = bloom_params(len(keys), bits_per_key)
    bits = bytearray(num_bits // 8)
    for key in keys:
        h = murmur3_32(key, BLOOM_SEED)
        delta = ((h >> 17) | (h << 15)) & _M32
        for _ in range(num_hashes):
            pos = h % num_bits
            bits[pos >> 3] |= 1 << (pos & 7)
            h = (h + delta) & _M32
    return bytes(bits), num_bits, num_hashes


def bloom_may_contain(bits, num_bits: int, num_hashes: int, key: bytes) -> bool:
    h = murmur3_32(key, BLOOM_SEED)
    delta = ((h >> 17) | (h << 15)) & _M32
    for _ in range(num_hashes):
        pos = h % num_bits
        if not bits[pos >> 3] & (1 << (pos & 7)):
            return False
        h = (h + delta) & _M32
    return True


def entry_size(key: bytes, value) -> int:
    return ENTRY_HEADER_SIZE + len(key) + (0 if value is None else len(value))


def encode_block(entries) -> bytes:
    out = bytearray()
    pack = ENTRY_HEADER.pack
    for key, seq, value in entries:
        if value is None:
            out += pack(len(key), KIND_TOMBSTONE, seq, 0)
            out += key
        else:
            out += pack(len(key), KIND_VALUE, seq, len(value))
            out += key
            out += value
    return bytes(out)


def decode_block(buf) -> list:
    buf = bytes(buf)
    out = []
    pos = 0
    end = len(buf)
    unpack = ENTRY_HEADER.unpack_from
    while pos < end:
        if pos + ENTRY_HEADER_SIZE > end:
            raise CorruptData("truncated entry header")
        klen, kind, seq, vlen = unpack(buf, pos)
        pos += ENTRY_HEADER_SIZE
        if pos + klen + vlen > end or kind > KIND_TOMBSTONE:
            raise CorruptData("bad entry")
        key = buf[pos:pos + klen]
        pos += klen
        if kind == KIND_TOMBSTONE:
            out.append((key, seq, None))
        else:
            out.append((key, seq, buf[pos:pos + vlen]))
            pos += vlen
    return out


def block_find(buf, key: bytes):
    """Return the first (highest-seq) entry for ``key`` in an encoded block."""
    buf = bytes(buf)
    pos = 0
    end = len(buf)
    unpack = ENTRY_HEADER.unpack_from
    while pos < end:
        klen, kind, seq, vlen = unpack(buf, pos)
        pos += ENTRY_HEADER_SIZE
        k = buf[pos:pos + klen]
        pos += klen
        if k == key:
            if kind == KIND_TOMBSTONE:
                return (k, seq, None)
            return (k, seq, buf[pos:pos + vlen])
        if k > key:
            return None
        pos += vlen
    return None


def _sort_key(entry):
    return (entry[0], -entry[1])


def merge_entries(runs, purge_tombstones: bool) -> list:
    """K-way merge of sorted runs keeping the highest-seq version per key.

    Each run must be sorted by (key asc, seq desc). A (key, seq) pair seen
    twice raises CorruptData.
    """
    out = []
    last_key = None
    last_seq = -1
    for entry in heapq.merge(*runs, key=_sort_key):
        key, seq, value = entry
        if key == last_key:
            if seq == last_seq:
                raise CorruptData(f"duplicate entry for key {key!r} seq {seq}")
            last_seq = seq
            continue
        last_key = key
        last_seq = seq
        if value is None and purge_tombstones:
            continue
        out.append(entry)
    return out
