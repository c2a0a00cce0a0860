"""Object and log storage behind a StoC.

``MemoryBacking`` keeps everything in dicts and loses it on restart.
``DiskBacking`` writes one file per object (``objects/<range>-<file_no>.sst``)
and segmented append files per log (``logs/<log_id>.log.<segment>``), and
fsyncs before returning, so anything acknowledged survives a process kill.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from collections import deque

from dlsm.errors import AlreadyExists, NotFound, OutOfRange
from dlsm.ids import ObjectId

RECORD_HEADER = struct.Struct("<QII")  # lsn, length, crc32
SEGMENT_BYTES = 1 << 20


class LogState:
    def __init__(self):
        self.first_lsn = 1
        self.next_lsn = 1
        self.records: deque = deque()
        self.lock = threading.Lock()

    def append(self, record: bytes) -> int:
        lsn = self.next_lsn
        if not self.records:
            self.first_lsn = lsn
        self.records.append(record)
        self.next_lsn += 1
        return lsn

    def read(self, from_lsn: int) -> tuple[int, list]:
        start = max(from_lsn, self.first_lsn)
        if start >= self.next_lsn:
            return start, []
        skip = start - self.first_lsn
        return start, list(self.records)[skip:]

    def truncate(self, upto_lsn: int) -> None:
        while self.records and self.first_lsn <= upto_lsn:
            self.records.popleft()
            self.first_lsn += 1
        if not self.records:
            self.first_lsn = max(self.first_lsn, min(upto_lsn + 1, self.next_lsn))


class MemoryBacking:
    tier = "mem"

    def __init__(self):
        self.objects: dict[ObjectId, bytes] = {}
        self.logs: dict[int, LogState] = {}
        self.epochs: dict[int, int] = {}
        self._lock = threading.Lock()

    # objects
    def put(self, oid: ObjectId, data: bytes) -> None:
        with self._lock:
            if oid in self.objects:
                raise AlreadyExists(f"object {oid} already stored")
            self.objects[oid] = data

    def read(self, oid: ObjectId, offset: int, length: int) -> bytes:
        data = self.objects.get(oid)
        if data is None:
            raise NotFound(f"object {oid} not found")
        if offset < 0 or length < 0 or offset + length > len(data):
            raise OutOfRange(f"[{offset}, {offset + length}) outside object of {len(data)} bytes")
        return data[offset:offset + length]

    def size(self, oid: ObjectId) -> int:
        data = self.objects.get(oid)
        if data is None:
            raise NotFound(f"object {oid} not found")
        return len(data)

    def delete(self, oid: ObjectId) -> int:
        with self._lock:
            data = self.objects.pop(oid, None)
        if data is None:
            raise NotFound(f"object {oid} not found")
        return len(data)

    def list(self, range_id=None) -> list:
        return sorted((oid, len(d)) for oid, d in list(self.objects.items())
                      if range_id is None or oid.range_id == range_id)

    # logs
    def log(self, log_id: int, create: bool = False) -> LogState:
        st = self.logs.get(log_id)
        if st is None:
            if not create:
                raise NotFound(f"log {log_id} not found")
            with self._lock:
                st = self.logs.setdefault(log_id, LogState())
        return st

    def append(self, log_id: int, record: bytes) -> int:
        st = self.log(log_id, create=True)
        with st.lock:
            return st.append(record)

    def truncate(self, log_id: int, upto_lsn: int) -> None:
        st = self.log(log_id)
        with st.lock:
            st.truncate(upto_lsn)

    def save_epochs(self) -> None:
        pass

    def close(self) -> None:
        pass


def _fsync_dir(path: str) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class DiskBacking(MemoryBacking):
    tier = "disk"

    def __init__(self, directory: str, fsync: bool = True):
        super().__init__()
        self.directory = directory
        self.fsync = fsync
        self.obj_dir = os.path.join(directory, "objects")
        self.log_dir = os.path.join(directory, "logs")
        os.makedirs(self.obj_dir, exist_ok=True)
        os.makedirs(self.log_dir, exist_ok=True)
        self._sizes: dict[ObjectId, int] = {}
        self._segments: dict[int, list] = {}  # log_id -> [(seg_no, first_lsn, last_lsn)]
        self._seg_fh: dict[int, object] = {}
        self._load()

    def _obj_path(self, oid: ObjectId) -> str:
        return os.path.join(self.obj_dir, f"{oid.range_id}-{oid.file_no}.sst")

    def _sync(self, fh) -> None:
        fh.flush()
        if self.fsync:
            os.fsync(fh.fileno())

    def _load(self) -> None:
        for name in os.listdir(self.obj_dir):
            path = os.path.join(self.obj_dir, name)
            if name.endswith(".tmp"):
                os.unlink(path)
                continue
            if name.endswith(".sst"):
                oid = ObjectId.parse(name[:-4])
                self._sizes[oid] = os.path.getsize(path)
        epochs_path = os.path.join(self.directory, "epochs.json")
        if os.path.exists(epochs_path):
            with open(epochs_path) as fh:
                self.epochs = {int(k): v for k, v in json.load(fh).items()}
        by_log: dict[int, list] = {}
        for name in os.listdir(self.log_dir):
            if ".log." in name:
                log_id, seg = name.split(".log.")
                by_log.setdefault(int(log_id), []).append(int(seg))
        trunc = {}
        for name in os.listdir(self.log_dir):
            if name.endswith(".trunc"):
                with open(os.path.join(self.log_dir, name)) as fh:
                    trunc[int(name[:-6])] = int(fh.read().strip() or 0)
        for log_id in set(by_log) | set(trunc):
            st = LogState()
            upto = trunc.get(log_id, 0)
            max_lsn = upto
            segs = []
            for seg in sorted(by_log.get(log_id, [])):
                path = os.path.join(self.log_dir, f"{log_id}.log.{seg}")
                first = last = None
                with open(path, "r+b") as fh:
                    buf = fh.read()
                    pos = 0
                    while pos + RECORD_HEADER.size <= len(buf):
                        lsn, length, crc = RECORD_HEADER.unpack_from(buf, pos)
                        body = buf[pos + RECORD_HEADER.size: pos + RECORD_HEADER.size + length]
                        if len(body) != length or zlib.crc32(body) & 0xFFFFFFFF != crc:
                            break  # torn tail write
                        pos += RECORD_HEADER.size + length
                        first = lsn if first is None else first
                        last = lsn
                        max_lsn = max(max_lsn, lsn)
                        if lsn > upto:
                            if not st.records:
                                st.first_lsn = lsn
                            st.records.append(body)
                    if pos != len(buf):
                        fh.truncate(pos)
                segs.append((seg, first, last))
            st.next_lsn = max_lsn + 1
            if not st.records:
                st.first_lsn = st.next_lsn
            self.logs[log_id] = st
            self._segments[log_id] = segs

    def put(self, oid: ObjectId, data: bytes) -> None:
        with self._lock:
            if oid in self._sizes:
                raise AlreadyExists(f"object {oid} already stored")
            path = self._obj_path(oid)
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(data)
                self._sync(fh)
            os.replace(tmp, path)
            if self.fsync:
                _fsync_dir(self.obj_dir)
            self._sizes[oid] = len(data)

    def read(self, oid: ObjectId, offset: int, length: int) -> bytes:
        size = self._sizes.get(oid)
        if size is None:
            raise NotFound(f"object {oid} not found")
        if offset < 0 or length < 0 or offset + length > size:
            raise OutOfRange(f"[{offset}, {offset + length}) outside object of {size} bytes")
        try:
            with open(self._obj_path(oid), "rb") as fh:
                return os.pread(fh.fileno(), length, offset)
        except FileNotFoundError:
            raise NotFound(f"object {oid} not found") from None

    def size(self, oid: ObjectId) -> int:
        size = self._sizes.get(oid)
        if size is None:
            raise NotFound(f"object {oid} not found")
        return size

    def delete(self, oid: ObjectId) -> int:
        with self._lock:
            size = self._sizes.pop(oid, None)
            if size is None:
                raise NotFound(f"object {oid} not found")
            try:
                os.unlink(self._obj_path(oid))
            except FileNotFoundError:
                pass
        return size

    def list(self, range_id=None) -> list:
        return sorted((oid, n) for oid, n in list(self._sizes.items())
                      if range_id is None or oid.range_id == range_id)

    def _segment_for(self, log_id: int, lsn: int):
        segs = self._segments.setdefault(log_id, [])
        fh = self._seg_fh.get(log_id)
        if fh is None or fh.tell() >= SEGMENT_BYTES:
            if fh is not None:
                fh.close()
            seg = segs[-1][0] + 1 if segs else 0
            path = os.path.join(self.log_dir, f"{log_id}.log.{seg}")
            fh = open(path, "ab")
            segs.append((seg, lsn, lsn))
            self._seg_fh[log_id] = fh
            if self.fsync:
                _fsync_dir(self.log_dir)
        return fh

    def append(self, log_id: int, record: bytes) -> int:
        st = self.log(log_id, create=True)
        with st.lock:
            lsn = st.next_lsn
            fh = self._segment_for(log_id, lsn)
            fh.write(RECORD_HEADER.pack(lsn, len(record), zlib.crc32(record) & 0xFFFFFFFF) + record)
            self._sync(fh)
            segs = self._segments[log_id]
            seg, first, _ = segs[-1]
            segs[-1] = (seg, first if first is not None else lsn, lsn)
            return st.append(record)

    def truncate(self, log_id: int, upto_lsn: int) -> None:
        st = self.log(log_id)
        with st.lock:
            if upto_lsn <= 0:
                return
            path = os.path.join(self.log_dir, f"{log_id}.trunc")
            with open(path + ".tmp", "w") as fh:
                fh.write(str(upto_lsn))
                self._sync(fh)
            os.replace(path + ".tmp", path)
            st.truncate(upto_lsn)
            keep = []
            open_fh = self._seg_fh.get(log_id)
            for seg, first, last in self._segments.get(log_id, []):
                seg_path = os.path.join(self.log_dir, f"{log_id}.log.{seg}")
                is_open = open_fh is not None and open_fh.name == seg_path
                if last is not None and last <= upto_lsn and not is_open:
                    os.unlink(seg_path)
                else:
                    keep.append((seg, first, last))
            self._segments[log_id] = keep

    def save_epochs(self) -> None:
        path = os.path.join(self.directory, "epochs.json")
        with open(path + ".tmp", "w") as fh:
            json.dump({str(k): v for k, v in self.epochs.items()}, fh)
            self._sync(fh)
        os.replace(path + ".tmp", path)

    def close(self) -> None:
        for fh in self._seg_fh.values():
            try:
                fh.close()
            except OSError:
                pass
        self._seg_fh.clear()
