"""Latency and throughput bookkeeping for benchmark runs."""

from __future__ import annotations

import math
import threading
from array import array
from dataclasses import dataclass, field

import numpy as np

from dlsm.bench.workload import KINDS

_CODE = {k: i for i, k in enumerate(KINDS)}


def percentiles(values, qs=(50, 90, 99)) -> tuple:
    """Nearest-rank style percentiles; zeros for an empty sample."""
    if len(values) == 0:
        return tuple(0.0 for _ in qs)
    arr = np.asarray(values, dtype=np.float64)
    return tuple(float(v) for v in np.percentile(arr, qs, method="higher"))


@dataclass
class SecondStats:
    second: int
    ops: int
    errors: int
    p50_us: float
    p90_us: float
    p99_us: float
    ltcs: int = 0
    backlog: float = 0.0
    utilization: dict = field(default_factory=dict)


@dataclass
class RunMetrics:
    """Per-second series plus the raw latency samples they were built from."""

    seconds: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (time, text)
    backlog_samples: list = field(default_factory=list)  # (time, pending jobs)
    mismatches: list = field(default_factory=list)
    oracle_checks: int = 0
    start: float = 0.0
    end: float = 0.0
    ends: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kinds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    latencies_us: np.ndarray = field(default_factory=lambda: np.zeros(0))
    oks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def total_ops(self) -> int:
        return int(self.oks.sum())

    @property
    def errors(self) -> int:
        return int(len(self.oks) - self.oks.sum())

    @property
    def duration(self) -> float:
        return max(0.0, self.end - self.start)

    def _mask(self, kind=None, t0=None, t1=None) -> np.ndarray:
        m = self.oks.copy()
        if kind is not None:
            m &= self.kinds == _CODE[kind]
        if t0 is not None:
            m &= self.ends >= t0
        if t1 is not None:
            m &= self.ends < t1
        return m

    def latency_percentiles(self, kind=None, t0=None, t1=None, qs=(50, 90, 99)) -> tuple:
        return percentiles(self.latencies_us[self._mask(kind, t0, t1)], qs)

    def throughput(self, t0=None, t1=None) -> float:
        """Completed ops per second over ``[t0, t1)``."""
        t0 = self.start if t0 is None else t0
        t1 = self.end if t1 is None else t1
        if t1 <= t0:
            return 0.0
        return float(self._mask(None, t0, t1).sum()) / (t1 - t0)

    def mean_backlog(self, t0=None, t1=None) -> float:
        vals = [b for t, b in self.backlog_samples
                if (t0 is None or t >= t0) and (t1 is None or t < t1)]
        return sum(vals) / len(vals) if vals else 0.0

    def ops_by_kind(self) -> dict:
        return {k: int(((self.kinds == _CODE[k]) & self.oks).sum()) for k in KINDS}


class Recorder:
    """Collects op samples from any number of client threads.

    Appends go to per-thread buffers through a lock held only for the
    append; :meth:`finish` builds the per-second series.
    """

    def __init__(self, start: float = 0.0):
        self.start = start
        self._lock = threading.Lock()
        self._ends = array("d")
        self._lat = array("d")
        self._kinds = array("b")
        self._oks = array("b")
        self.events: list = []
        self.backlog_samples: list = []
        self.mismatches: list = []
        self._second_info: dict = {}

    def record(self, kind: str, t_start: float, t_end: float, ok: bool = True) -> None:
        with self._lock:
            self._ends.append(t_end)
            self._lat.append((t_end - t_start) * 1e6)
            self._kinds.append(_CODE[kind])
            self._oks.append(1 if ok else 0)

    def event(self, t: float, text: str) -> None:
        with self._lock:
            self.events.append((t, text))

    def mismatch(self, text: str) -> None:
        with self._lock:
            self.mismatches.append(text)

    def sample(self, t: float, backlog: float, ltcs: int = 0, utilization: dict | None = None) -> None:
        """Cluster-side gauges; the last sample in a second wins for ltcs/utilization."""
        with self._lock:
            self.backlog_samples.append((t, backlog))
            sec = int(math.floor(t - self.start))
            self._second_info[sec] = (ltcs, dict(utilization or {}))

    def count(self) -> int:
        return len(self._ends)

    def last_end(self) -> float:
        with self._lock:
            return max(self._ends) if self._ends else self.start

    def window(self, t0: float, t1: float) -> tuple:
        """``(ok count, latencies us)`` for ops that ended in ``[t0, t1)``.

        Walks back from the newest sample; ends are nearly sorted.
        """
        n = 0
        lats = []
        with self._lock:
            for i in range(len(self._ends) - 1, -1, -1):
                t = self._ends[i]
                if t < t0 - 1.0:
                    break
                if t0 <= t < t1 and self._oks[i]:
                    n += 1
                    lats.append(self._lat[i])
        return n, lats

    def finish(self, end: float) -> RunMetrics:
        with self._lock:
            ends = np.frombuffer(self._ends, dtype=np.float64).copy()
            lat = np.frombuffer(self._lat, dtype=np.float64).copy()
            kinds = np.frombuffer(self._kinds, dtype=np.int8).copy()
            oks = np.frombuffer(self._oks, dtype=np.int8).astype(bool)
            backlog = sorted(self.backlog_samples)
            info = dict(self._second_info)
            events = sorted(self.events)
            mismatches = list(self.mismatches)
        n_sec = max(0, int(math.ceil(end - self.start - 1e-9)))
        secs = np.floor(ends - self.start).astype(np.int64) if len(ends) else np.zeros(0, dtype=np.int64)
        rows = []
        for s in range(n_sec):
            in_sec = secs == s
            good = in_sec & oks
            p50, p90, p99 = percentiles(lat[good])
            bl = [b for t, b in backlog if s <= t - self.start < s + 1]
            ltcs, util = info.get(s, (0, {}))
            rows.append(SecondStats(s, int(good.sum()), int((in_sec & ~oks).sum()), p50, p90, p99,
                                    ltcs, sum(bl) / len(bl) if bl else 0.0, util))
        return RunMetrics(rows, events, backlog, mismatches, 0, self.start, end, ends, kinds, lat, oks)
