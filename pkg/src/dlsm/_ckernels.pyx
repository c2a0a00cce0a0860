# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; bit-identical to ``_kernels_py``."""

from libc.stdint cimport uint8_t, uint16_t, uint32_t, uint64_t
from libc.string cimport memcmp, memcpy
from libc.stdlib cimport malloc, free
from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_GET_SIZE, PyBytes_FromStringAndSize

from dlsm.errors import CorruptData

BACKEND = "cython"

cdef uint32_t C1 = 0xCC9E2D51u
cdef uint32_t C2 = 0x1B873593u
BLOOM_SEED = 0xBC9F1D34
cdef uint32_t _BLOOM_SEED = 0xBC9F1D34

ENTRY_HEADER_SIZE = 15
KIND_VALUE = 0
KIND_TOMBSTONE = 1


cdef inline uint32_t _rotl(uint32_t x, int r) noexcept nogil:
    return (x << r) | (x >> (32 - r))


cdef uint32_t _murmur(const uint8_t* data, Py_ssize_t n, uint32_t seed) noexcept nogil:
    cdef uint32_t h = seed
    cdef uint32_t k
    cdef Py_ssize_t nblocks = n >> 2
    cdef Py_ssize_t i
    cdef const uint8_t* p
    for i in range(nblocks):
        p = data + (i << 2)
        k = <uint32_t>p[0] | (<uint32_t>p[1] << 8) | (<uint32_t>p[2] << 16) | (<uint32_t>p[3] << 24)
        k *= C1
        k = _rotl(k, 15)
        k *= C2
        h ^= k
        h = _rotl(h, 13)
        h = h * 5u + 0xE6546B64u
    cdef const uint8_t* tail = data + (nblocks << 2)
    cdef int rem = n & 3
    k = 0
    if rem:
        if rem == 3:
            k ^= <uint32_t>tail[2] << 16
        if rem >= 2:
            k ^= <uint32_t>tail[1] << 8
        k ^= tail[0]
        k *= C1
        k = _rotl(k, 15)
        k *= C2
        h ^= k
    h ^= <uint32_t>n
    h ^= h >> 16
    h *= 0x85EBCA6Bu
    h ^= h >> 13
    h *= 0xC2B2AE35u
    h ^= h >> 16
    return h


def murmur3_32(bytes data, seed=0):
    return _murmur(<const uint8_t*>PyBytes_AS_STRING(data), PyBytes_GET_SIZE(data),
                   <uint32_t>(seed & 0xFFFFFFFF))


def bloom_params(n_keys, bits_per_key):
    num_bits = max(64, n_keys * bits_per_key)
    num_bits = ((num_bits + 7) // 8) * 8
    num_hashes = max(1, min(30, int(bits_per_key * 0.69)))
    return num_bits, num_hashes


def bloom_build(keys, int bits_per_key):
    num_bits_o, num_hashes_o = bloom_params(len(keys), bits_per_key)
    cdef uint64_t num_bits = num_bits_o
    cdef int num_hashes = num_hashes_o
    cdef bytearray bits = bytearray(num_bits // 8)
    cdef uint8_t* b = <uint8_t*>(<char*>bits)
    cdef uint32_t h, delta
    cdef uint64_t pos
    cdef int j
    cdef bytes key
    for key in keys:
        h = _murmur(<const uint8_t*>PyBytes_AS_STRING(key), PyBytes_GET_SIZE(key), _BLOOM_SEED)
        delta = (h >> 17) | (h << 15)
        for j in range(num_hashes):
            pos = h % num_bits
            b[pos >> 3] |= <uint8_t>(1 << (pos & 7))
            h += delta
    return bytes(bits), num_bits_o, num_hashes_o


def bloom_may_contain(bits, uint64_t num_bits, int num_hashes, bytes key):
    cdef const uint8_t[:] view = bits
    cdef uint32_t h = _murmur(<const uint8_t*>PyBytes_AS_STRING(key), PyBytes_GET_SIZE(key), _BLOOM_SEED)
    cdef uint32_t delta = (h >> 17) | (h << 15)
    cdef uint64_t pos
    cdef int j
    for j in range(num_hashes):
        pos = h % num_bits
        if not (view[pos >> 3] & (1 << (pos & 7))):
            return False
        h += delta
    return True


def entry_size(bytes key, value):
    return 15 + len(key) + (0 if value is None else len(value))


cdef inline void _put16(uint8_t* p, uint16_t v) noexcept nogil:
    p[0] = v & 0xFF
    p[1] = (v >> 8) & 0xFF


cdef inline void _put32(uint8_t* p, uint32_t v) noexcept nogil:
    cdef int i
    for i in range(4):
        p[i] = (v >> (8 * i)) & 0xFF


cdef inline void _put64(uint8_t* p, uint64_t v) noexcept nogil:
    cdef int i
    for i in range(8):
        p[i] = (v >> (8 * i)) & 0xFF


cdef inline uint16_t _get16(const uint8_t* p) noexcept nogil:
    return <uint16_t>p[0] | (<uint16_t>p[1] << 8)


cdef inline uint32_t _get32(const uint8_t* p) noexcept nogil:
    return <uint32_t>p[0] | (<uint32_t>p[1] << 8) | (<uint32_t>p[2] << 16) | (<uint32_t>p[3] << 24)


cdef inline uint64_t _get64(const uint8_t* p) noexcept nogil:
    cdef uint64_t v = 0
    cdef int i
    for i in range(8):
        v |= (<uint64_t>p[i]) << (8 * i)
    return v


def encode_block(entries):
    cdef Py_ssize_t total = 0
    cdef bytes key
    cdef object value
    for key, seq, value in entries:
        total += 15 + PyBytes_GET_SIZE(key)
        if value is not None:
            total += len(value)
    out = PyBytes_FromStringAndSize(NULL, total)
    cdef uint8_t* p = <uint8_t*>PyBytes_AS_STRING(out)
    cdef Py_ssize_t klen, vlen
    cdef bytes vb
    for key, seq, value in entries:
        klen = PyBytes_GET_SIZE(key)
        _put16(p, <uint16_t>klen)
        _put64(p + 3, <uint64_t>seq)
        if value is None:
            p[2] = 1
            _put32(p + 11, 0)
            memcpy(p + 15, PyBytes_AS_STRING(key), klen)
            p += 15 + klen
        else:
            vb = value if type(value) is bytes else bytes(value)
            vlen = PyBytes_GET_SIZE(vb)
            p[2] = 0
            _put32(p + 11, <uint32_t>vlen)
            memcpy(p + 15, PyBytes_AS_STRING(key), klen)
            memcpy(p + 15 + klen, PyBytes_AS_STRING(vb), vlen)
            p += 15 + klen + vlen
    return out


def decode_block(buf):
    cdef bytes b = buf if type(buf) is bytes else bytes(buf)
    cdef const uint8_t* base = <const uint8_t*>PyBytes_AS_STRING(b)
    cdef Py_ssize_t end = PyBytes_GET_SIZE(b)
    cdef Py_ssize_t pos = 0
    cdef uint16_t klen
    cdef uint8_t kind
    cdef uint64_t seq
    cdef uint32_t vlen
    out = []
    while pos < end:
        if pos + 15 > end:
            raise CorruptData("truncated entry header")
        klen = _get16(base + pos)
        kind = base[pos + 2]
        seq = _get64(base + pos + 3)
        vlen = _get32(base + pos + 11)
        pos += 15
        if pos + klen + vlen > end or kind > 1:
            raise CorruptData("bad entry")
        key = PyBytes_FromStringAndSize(<const char*>(base + pos), klen)
        pos += klen
        if kind == 1:
            out.append((key, seq, None))
        else:
            out.append((key, seq, PyBytes_FromStringAndSize(<const char*>(base + pos), vlen)))
            pos += vlen
    return out


cdef inline int _cmp_keys(const uint8_t* a, Py_ssize_t alen, const uint8_t* b, Py_ssize_t blen) noexcept nogil:
    cdef Py_ssize_t n = alen if alen < blen else blen
    cdef int c = memcmp(a, b, n)
    if c != 0:
        return c
    if alen < blen:
        return -1
    if alen > blen:
        return 1
    return 0


def block_find(buf, bytes key):
    cdef bytes b = buf if type(buf) is bytes else bytes(buf)
    cdef const uint8_t* base = <const uint8_t*>PyBytes_AS_STRING(b)
    cdef Py_ssize_t end = PyBytes_GET_SIZE(b)
    cdef const uint8_t* kp = <const uint8_t*>PyBytes_AS_STRING(key)
    cdef Py_ssize_t kn = PyBytes_GET_SIZE(key)
    cdef Py_ssize_t pos = 0
    cdef uint16_t klen
    cdef uint8_t kind
    cdef uint64_t seq
    cdef uint32_t vlen
    cdef int c
    while pos + 15 <= end:
        klen = _get16(base + pos)
        kind = base[pos + 2]
        seq = _get64(base + pos + 3)
        vlen = _get32(base + pos + 11)
        pos += 15
        c = _cmp_keys(base + pos, klen, kp, kn)
        if c == 0:
            if kind == 1:
                return (key, seq, None)
            return (key, seq, PyBytes_FromStringAndSize(<const char*>(base + pos + klen), vlen))
        if c > 0:
            return None
        pos += klen + vlen
    return None


cdef struct _Cursor:
    Py_ssize_t run
    Py_ssize_t idx
    Py_ssize_t n


cdef inline int _entry_less(object ea, object eb) except -1:
    # (key asc, seq desc)
    cdef bytes ka = ea[0]
    cdef bytes kb = eb[0]
    cdef int c = _cmp_keys(<const uint8_t*>PyBytes_AS_STRING(ka), PyBytes_GET_SIZE(ka),
                           <const uint8_t*>PyBytes_AS_STRING(kb), PyBytes_GET_SIZE(kb))
    if c != 0:
        return c < 0
    return ea[1] > eb[1]


def merge_entries(runs, bint purge_tombstones):
    cdef list rl = [list(run) for run in runs]
    cdef Py_ssize_t k = len(rl)
    out = []
    if k == 0:
        return out
    cdef Py_ssize_t* heap = <Py_ssize_t*>malloc(k * sizeof(Py_ssize_t))
    cdef Py_ssize_t* idx = <Py_ssize_t*>malloc(k * sizeof(Py_ssize_t))
    cdef Py_ssize_t hn = 0, i, j, child, top, r
    cdef object last_key = None
    cdef object last_seq = -1
    cdef object e
    try:
        for i in range(k):
            idx[i] = 0
            if len(rl[i]) > 0:
                # sift up
                j = hn
                heap[hn] = i
                hn += 1
                while j > 0:
                    r = (j - 1) >> 1
                    if _heap_less(rl, idx, heap[j], heap[r]):
                        heap[j], heap[r] = heap[r], heap[j]
                        j = r
                    else:
                        break
        while hn > 0:
            top = heap[0]
            e = (<list>rl[top])[idx[top]]
            idx[top] += 1
            if idx[top] >= len(rl[top]):
                hn -= 1
                heap[0] = heap[hn]
            _sift_down(rl, idx, heap, hn)
            key = e[0]
            seq = e[1]
            if last_key is not None and key == last_key:
                if seq == last_seq:
                    raise CorruptData(f"duplicate entry for key {key!r} seq {seq}")
                last_seq = seq
                continue
            last_key = key
            last_seq = seq
            if e[2] is None and purge_tombstones:
                continue
            out.append(e)
    finally:
        free(heap)
        free(idx)
    return out


cdef inline int _heap_less(list rl, Py_ssize_t* idx, Py_ssize_t a, Py_ssize_t b) except -1:
    cdef int l = _entry_less((<list>rl[a])[idx[a]], (<list>rl[b])[idx[b]])
    if l:
        return 1
    if _entry_less((<list>rl[b])[idx[b]], (<list>rl[a])[idx[a]]):
        return 0
    # equal (key, seq): lower run index first, matching heapq.merge stability
    return a < b


cdef int _sift_down(list rl, Py_ssize_t* idx, Py_ssize_t* heap, Py_ssize_t hn) except -1:
    cdef Py_ssize_t j = 0, child, best
    while True:
        child = 2 * j + 1
        if child >= hn:
            break
        best = child
        if child + 1 < hn and _heap_less(rl, idx, heap[child + 1], heap[child]):
            best = child + 1
        if _heap_less(rl, idx, heap[best], heap[j]):
            heap[j], heap[best] = heap[best], heap[j]
            j = best
        else:
            break
    return 0
