"""Named crash points for fault-injection tests."""

from __future__ import annotations

import threading

from dlsm.errors import Crashed


class FaultPoints:
    """Per-component registry of armed crash points.

    ``arm("flush.after_put_object", after=2)`` makes the third hit of that
    point raise :class:`Crashed`. Unarmed points cost one dict lookup.
    """

    def __init__(self):
        self._armed: dict[str, int] = {}
        self._lock = threading.Lock()
        self.fired: list[str] = []

    def arm(self, name: str, after: int = 0) -> None:
        with self._lock:
            self._armed[name] = after

    def disarm(self, name: str | None = None) -> None:
        with self._lock:
            if name is None:
                self._armed.clear()
            else:
                self._armed.pop(name, None)

    def hit(self, name: str) -> None:
        if name not in self._armed:
            return
        with self._lock:
            left = self._armed.get(name)
            if left is None:
                return
            if left > 0:
                self._armed[name] = left - 1
                return
            del self._armed[name]
            self.fired.append(name)
        raise Crashed(f"crash point {name}")
