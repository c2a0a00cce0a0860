"""Workload specs and seeded operation generators.

Keys are 8-byte big-endian hashes of an item number, so item popularity is
independent of key order and load spreads over prefix-partitioned ranges.
The Zipfian generator follows the YCSB scrambled construction: draw a
popularity rank, then hash the rank to an item. Ranks are drawn by exact
inverse CDF rather than YCSB's closed-form approximation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from dlsm.errors import InvalidConfig

READ, WRITE, DELETE, SCAN = "read", "write", "delete", "scan"
KINDS = (READ, WRITE, DELETE, SCAN)

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


@dataclass
class WorkloadSpec:
    """JSON-serializable description of a client workload.

    Writes take whatever fraction is left after reads, scans and deletes.
    A run stops after ``duration`` seconds or ``ops`` operations, whichever
    comes first. ``rate`` paces each client (ops/s); ``None`` is closed loop.
    """

    read_fraction: float = 0.5
    scan_fraction: float = 0.0
    delete_fraction: float = 0.0
    key_count: int = 10_000
    value_size_bytes: int = 100
    distribution: str = "uniform"  # uniform | zipfian
    theta: float = 0.99
    duration: float = 10.0
    client_threads: int = 4
    scan_length: int = 10
    ops: int | None = None
    rate: float | None = None
    seed: int = 0

    def validate(self) -> "WorkloadSpec":
        problems = []
        for name in ("read_fraction", "scan_fraction", "delete_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if self.read_fraction + self.scan_fraction + self.delete_fraction > 1.0 + 1e-9:
            problems.append("read, scan and delete fractions must sum to <= 1")
        if self.key_count < 1:
            problems.append("key_count must be >= 1")
        if self.value_size_bytes < 0:
            problems.append("value_size_bytes must be >= 0")
        if self.distribution not in ("uniform", "zipfian"):
            problems.append("distribution must be uniform or zipfian")
        if self.distribution == "zipfian" and not 0.0 < self.theta < 1.0:
            problems.append("theta must be in (0, 1)")
        if self.duration <= 0 and not self.ops:
            problems.append("need a positive duration or an op count")
        if self.client_threads < 1:
            problems.append("client_threads must be >= 1")
        if self.rate is not None and self.rate <= 0:
            problems.append("rate must be positive")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    @property
    def write_fraction(self) -> float:
        return max(0.0, 1.0 - self.read_fraction - self.scan_fraction - self.delete_fraction)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "WorkloadSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"workload spec is not valid JSON: {exc}") from None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidConfig(f"unknown workload fields: {sorted(unknown)}")
        return cls(**data).validate()


def fnv1a64(values) -> np.ndarray:
    """FNV-1a over the 8 little-endian bytes of each value (YCSB's item hash)."""
    v = np.asarray(values, dtype=np.uint64)
    h = np.full(v.shape, _FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (v >> np.uint64(shift)) & np.uint64(0xFF)
            h *= _FNV_PRIME
    return h


def _mix64(values) -> np.ndarray:
    # splitmix64 finalizer
    z = np.asarray(values, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def item_keys(items) -> list:
    """8-byte big-endian keys for item numbers."""
    return [int(h).to_bytes(8, "big") for h in _mix64(items)]


def item_key(item: int) -> bytes:
    return item_keys([item])[0]


def zipf_rank_pmf(n: int, theta: float) -> np.ndarray:
    """P(rank = i) for i in 0..n-1: proportional to 1 / (i + 1) ** theta."""
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** theta
    return w / w.sum()


def scramble(ranks, n: int) -> np.ndarray:
    return (fnv1a64(ranks) % np.uint64(n)).astype(np.int64)


def scrambled_zipf_pmf(n: int, theta: float) -> np.ndarray:
    """Analytic per-item probability under the scrambled Zipfian generator."""
    return np.bincount(scramble(np.arange(n), n), weights=zipf_rank_pmf(n, theta), minlength=n)


class ZipfianGenerator:
    """Scrambled Zipfian item numbers in ``[0, n)``."""

    def __init__(self, n: int, theta: float = 0.99, seed=0, scrambled: bool = True):
        if n < 1 or not 0.0 < theta < 1.0:
            raise InvalidConfig("zipfian needs n >= 1 and theta in (0, 1)")
        self.n = n
        self.theta = theta
        self.scrambled = scrambled
        self.rng = np.random.default_rng(seed)
        self._cdf = np.cumsum(zipf_rank_pmf(n, theta))
        self._cdf[-1] = 1.0

    def ranks(self, size: int) -> np.ndarray:
        u = self.rng.random(size)
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n - 1)

    def draw(self, size: int) -> np.ndarray:
        r = self.ranks(size)
        return scramble(r, self.n) if self.scrambled else r


class OpGenerator:
    """Deterministic op stream for one client: identical per (spec, client_id).

    With ``partition=(i, n)`` the client only touches items congruent to i
    mod n, which keeps concurrent clients' key sets disjoint.
    """

    def __init__(self, spec: WorkloadSpec, client_id: int = 0, partition: tuple | None = None,
                 batch: int = 1024):
        self.spec = spec
        self.partition = partition
        self.batch = batch
        ss = np.random.SeedSequence([spec.seed, client_id])
        self.rng = np.random.default_rng(ss)
        self.zipf = (ZipfianGenerator(spec.key_count, spec.theta, ss.spawn(1)[0])
                     if spec.distribution == "zipfian" else None)
        self._buf: list = []
        self._pos = 0
        self.issued = 0

    def _items(self, size: int) -> np.ndarray:
        if self.zipf is not None:
            items = self.zipf.draw(size)
        else:
            items = self.rng.integers(0, self.spec.key_count, size)
        if self.partition is not None:
            i, n = self.partition
            items = items - items % n + i
            items = np.where(items >= self.spec.key_count, items - n, items)
            items = np.maximum(items, i)
        return items

    def _refill(self) -> None:
        spec = self.spec
        n = self.batch
        u = self.rng.random(n)
        keys = item_keys(self._items(n))
        vals = self.rng.bytes(n * spec.value_size_bytes)
        r, s, d = spec.read_fraction, spec.scan_fraction, spec.delete_fraction
        out = []
        for j in range(n):
            x = u[j]
            if x < r:
                out.append((READ, keys[j], None))
            elif x < r + s:
                out.append((SCAN, keys[j], spec.scan_length))
            elif x < r + s + d:
                out.append((DELETE, keys[j], None))
            else:
                sz = spec.value_size_bytes
                out.append((WRITE, keys[j], vals[j * sz:(j + 1) * sz]))
        self._buf = out
        self._pos = 0

    def next(self) -> tuple:
        """``(kind, key, payload)``: the value for writes, the length for scans."""
        if self._pos >= len(self._buf):
            self._refill()
        op = self._buf[self._pos]
        self._pos += 1
        self.issued += 1
        return op

    def take(self, n: int) -> list:
        return [self.next() for _ in range(n)]
