"""Frame layout and payload codec.

Header (little-endian, 26 bytes)::

    magic u32 | frame_len u32 | request_id u64 | kind u16 | epoch u64

``frame_len`` covers header plus payload. Payloads are MessagePack maps.
A successful response echoes the request id with ``kind | 0x8000``; a
failure uses ``KIND_ERROR`` and carries ``{code, msg, data}``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import msgpack

from dlsm.errors import DlsmError, Oversize, ProtocolError, UnknownOpcode

MAGIC = 0x4E564C53
HEADER = struct.Struct("<IIQHQ")
HEADER_SIZE = HEADER.size
MAX_FRAME = 8 << 20
RESPONSE_BIT = 0x8000
KIND_ERROR = 0xFFFF


class Op(IntEnum):
    ECHO = 0x0001
    # StoC
    PUT_OBJECT = 0x0010
    GET_OBJECT = 0x0011
    DELETE_OBJECT = 0x0012
    LIST_OBJECTS = 0x0013
    STAT_OBJECT = 0x0014
    APPEND_LOG = 0x0018
    READ_LOG = 0x0019
    TRUNCATE_LOG = 0x001A
    STOC_STATS = 0x001F
    # LTC
    PUT = 0x0020
    GET = 0x0021
    DELETE = 0x0022
    SCAN = 0x0023
    ADOPT_RANGE = 0x0028
    RELEASE_RANGE = 0x0029
    LTC_STATUS = 0x002A
    FLUSH = 0x002B
    COMPACT = 0x002C
    GC_SWEEP = 0x002D
    PLACEMENTS = 0x002E
    # compaction worker
    EXECUTE_JOB = 0x0030
    WORKER_STATUS = 0x0031
    # coordinator
    GET_VIEW = 0x0040
    REPORT_LOAD = 0x0041
    HEARTBEAT = 0x0042
    ADD_LTC = 0x0043
    REMOVE_LTC = 0x0044
    CLUSTER_STATUS = 0x0045


KNOWN_KINDS = frozenset(int(op) for op in Op)


def pack(obj) -> bytes:
    return msgpack.packb(obj, use_bin_type=True)


def unpack(buf):
    if not buf:
        return None
    return msgpack.unpackb(buf, raw=False, strict_map_key=False)


@dataclass
class Frame:
    kind: int
    request_id: int = 0
    epoch: int = 0
    payload: bytes = b""

    @property
    def is_response(self) -> bool:
        return self.kind == KIND_ERROR or bool(self.kind & RESPONSE_BIT)

    @property
    def is_error(self) -> bool:
        return self.kind == KIND_ERROR

    def encode(self) -> bytes:
        total = HEADER_SIZE + len(self.payload)
        if total > MAX_FRAME:
            raise Oversize(f"frame of {total} bytes exceeds {MAX_FRAME}")
        return HEADER.pack(MAGIC, total, self.request_id, self.kind, self.epoch) + self.payload

    @classmethod
    def decode_header(cls, buf) -> tuple[int, int, int, int]:
        """Return ``(frame_len, request_id, kind, epoch)`` after checking magic."""
        magic, frame_len, request_id, kind, epoch = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise ProtocolError(f"bad frame magic {magic:#x}")
        if frame_len < HEADER_SIZE:
            raise ProtocolError("frame_len shorter than header")
        return frame_len, request_id, kind, epoch

    @classmethod
    def decode(cls, buf) -> "Frame":
        if len(buf) < HEADER_SIZE:
            raise ProtocolError("truncated frame header")
        frame_len, request_id, kind, epoch = cls.decode_header(buf)
        if frame_len != len(buf):
            raise ProtocolError(f"frame_len {frame_len} != {len(buf)} bytes received")
        if frame_len > MAX_FRAME:
            raise Oversize(f"frame of {frame_len} bytes exceeds {MAX_FRAME}")
        base = kind & ~RESPONSE_BIT if kind != KIND_ERROR else kind
        if kind != KIND_ERROR and base not in KNOWN_KINDS:
            raise UnknownOpcode(f"unknown opcode {kind:#06x}")
        return cls(kind, request_id, epoch, bytes(buf[HEADER_SIZE:]))

    def reply(self, payload: bytes) -> "Frame":
        return Frame(self.kind | RESPONSE_BIT, self.request_id, self.epoch, payload)

    def error(self, exc: DlsmError) -> "Frame":
        return Frame(KIND_ERROR, self.request_id, self.epoch, pack(exc.to_wire()))


def request(op: int, args=None, request_id: int = 0, epoch: int = 0) -> Frame:
    return Frame(int(op), request_id, epoch, pack(args) if args is not None else b"")
