"""Typed calls to StoCs, remembering the load stats each reply carries."""

from __future__ import annotations

import threading

from dlsm.ids import ObjectId
from dlsm.stoc.server import STATS_KEY, StoCStats
from dlsm.transport.frame import Op
from dlsm.transport.service import Rpc


class StocClient:
    def __init__(self, rpc: Rpc, runtime=None):
        self.rpc = rpc
        self.runtime = runtime
        self._stats: dict[str, tuple[float, StoCStats]] = {}
        self._lock = threading.Lock()
        self.bytes_read = 0
        self.bytes_written = 0

    def _call(self, addr: str, op: Op, args, epoch: int = 0, timeout=None) -> dict:
        resp = self.rpc.call(addr, op, args, epoch=epoch, timeout=timeout)
        raw = resp.pop(STATS_KEY, None)
        if raw is not None:
            now = self.runtime.now() if self.runtime is not None else 0.0
            with self._lock:
                self._stats[addr] = (now, StoCStats.from_wire(raw))
        return resp

    def cached_stats(self, addr: str) -> StoCStats:
        with self._lock:
            entry = self._stats.get(addr)
        return entry[1] if entry else StoCStats()

    def stats_age(self, addr: str) -> float | None:
        with self._lock:
            entry = self._stats.get(addr)
        if entry is None or self.runtime is None:
            return None
        return self.runtime.now() - entry[0]

    def put_object(self, addr: str, oid: ObjectId, data: bytes, epoch: int = 0) -> dict:
        resp = self._call(addr, Op.PUT_OBJECT, {"id": list(oid), "data": data}, epoch)
        self.bytes_written += len(data)
        return resp

    def get_object(self, addr: str, oid: ObjectId, offset: int = 0, length: int | None = None) -> bytes:
        args = {"id": list(oid), "off": offset}
        if length is not None:
            args["len"] = length
        data = self._call(addr, Op.GET_OBJECT, args)["data"]
        self.bytes_read += len(data)
        return data

    def stat_object(self, addr: str, oid: ObjectId) -> int:
        return self._call(addr, Op.STAT_OBJECT, {"id": list(oid)})["len"]

    def delete_object(self, addr: str, oid: ObjectId, epoch: int = 0) -> None:
        self._call(addr, Op.DELETE_OBJECT, {"id": list(oid)}, epoch)

    def list_objects(self, addr: str, range_id: int | None = None) -> list:
        args = {} if range_id is None else {"range": range_id}
        return [(ObjectId(r, f), n) for r, f, n in self._call(addr, Op.LIST_OBJECTS, args)["objects"]]

    def append_log(self, addr: str, log_id: int, data: bytes, epoch: int = 0) -> int:
        return self._call(addr, Op.APPEND_LOG, {"log": log_id, "data": data}, epoch)["lsn"]

    def read_log(self, addr: str, log_id: int, from_lsn: int = 1) -> tuple[int, list]:
        resp = self._call(addr, Op.READ_LOG, {"log": log_id, "from": from_lsn})
        return resp["first_lsn"], resp["records"]

    def truncate_log(self, addr: str, log_id: int, upto_lsn: int, epoch: int = 0) -> None:
        self._call(addr, Op.TRUNCATE_LOG, {"log": log_id, "upto": upto_lsn}, epoch)

    def fence(self, addr: str, range_id: int, epoch: int) -> None:
        """Tell ``addr`` that writes for ``range_id`` below ``epoch`` are stale."""
        self._call(addr, Op.STOC_STATS, {"range": range_id}, epoch)

    def stats(self, addr: str) -> StoCStats:
        self._call(addr, Op.STOC_STATS, {})
        return self.cached_stats(addr)

    def fetcher(self, addr: str, oid: ObjectId):
        """A ``fetch(offset, length)`` callable for :class:`~dlsm.core.sstable.SSTable`."""
        return lambda offset, length: self.get_object(addr, oid, offset, length)
