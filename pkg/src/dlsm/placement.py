"""Power-of-d StoC selection."""

from __future__ import annotations

from dlsm.errors import NoCandidates


def _load_key(stats) -> tuple:
    return (stats.outstanding_requests, stats.ewma_latency_us)


def select_stoc_power_of_d(candidates, d: int, rng):
    """Sample ``d`` distinct candidates and return the least loaded one's identity.

    ``candidates`` is a sequence of ``(identity, StoCStats)`` pairs (a mapping
    works too). Load compares ``(outstanding_requests, ewma_latency_us)``;
    ties go to the earlier sample. Deterministic for a given ``rng`` state.
    """
    if hasattr(candidates, "items"):
        candidates = list(candidates.items())
    else:
        candidates = list(candidates)
    if not candidates:
        raise NoCandidates("no StoCs to choose from")
    if not 1 <= d <= len(candidates):
        raise NoCandidates(f"d={d} outside 1..{len(candidates)}")
    sample = rng.sample(range(len(candidates)), d)
    best = min(sample, key=lambda i: _load_key(candidates[i][1]))
    return candidates[best][0]
