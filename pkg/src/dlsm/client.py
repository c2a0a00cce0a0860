"""Key-value client: routes by the coordinator's view and retries on moves."""

from __future__ import annotations

import logging

from dlsm.coordinator import ClusterView, route
from dlsm.errors import (
    ClusterUnavailable,
    ConnectionFailed,
    NotOwner,
    StaleEpoch,
    StorageRead,
    Timeout,
    Unavailable,
)
from dlsm.transport.frame import Op
from dlsm.transport.service import Rpc

logger = logging.getLogger(__name__)

# StorageRead: the StoC holding a table is down; it usually comes back
_RETRYABLE = (NotOwner, StaleEpoch, ConnectionFailed, Timeout, Unavailable, StorageRead)


class Client:
    def __init__(self, transport, coordinator: str, runtime=None, retries: int = 50,
                 backoff_s: float = 0.02, timeout_s: float | None = 10.0):
        self.rpc = Rpc(transport, timeout_s)
        self.coordinator = coordinator
        self.runtime = runtime
        self.retries = retries
        self.backoff_s = backoff_s
        self.view: ClusterView | None = None
        self.retried = 0

    def refresh(self) -> ClusterView:
        self.view = ClusterView.from_wire(self.rpc.call(self.coordinator, Op.GET_VIEW, {}))
        return self.view

    def _sleep(self, attempt: int) -> None:
        if self.runtime is not None:
            self.runtime.sleep(min(self.backoff_s * (attempt + 1), 0.5))

    def _call(self, key: bytes, op: Op, args: dict):
        last = None
        for attempt in range(self.retries):
            if self.view is None:
                try:
                    self.refresh()
                except (ConnectionFailed, Timeout) as exc:
                    last = exc
                    self._sleep(attempt)
                    continue
            _, _, addr, epoch = route(self.view, key)
            try:
                return self.rpc.call(addr, op, args, epoch=epoch)
            except _RETRYABLE as exc:
                last = exc
                self.retried += 1
                self.view = None
                if attempt:
                    self._sleep(attempt)
        raise ClusterUnavailable(f"gave up after {self.retries} attempts: {last}")

    def put(self, key: bytes, value: bytes) -> dict:
        return self._call(key, Op.PUT, {"k": key, "v": value})

    def delete(self, key: bytes) -> dict:
        return self._call(key, Op.DELETE, {"k": key})

    def get(self, key: bytes):
        return self._call(key, Op.GET, {"k": key})["v"]

    def scan(self, lower: bytes, upper: bytes | None = None, limit: int = 100) -> list:
        """Pairs in ``[lower, upper)`` across ranges; no cross-range snapshot."""
        out: list = []
        cursor = lower
        while len(out) < limit:
            resp = self._call(cursor, Op.SCAN, {"lo": cursor, "hi": upper, "limit": limit - len(out)})
            out.extend((bytes(k), bytes(v)) for k, v in resp["items"])
            resume = resp.get("resume")
            if resume is None or (upper is not None and resume >= upper):
                break
            cursor = bytes(resume)
        return out[:limit]
