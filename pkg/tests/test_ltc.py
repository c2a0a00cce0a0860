import random
from collections import Counter

import pytest
from sortedcontainers import SortedDict

from dlsm.errors import (
    EmptyMemtable,
    InvalidKey,
    NoCandidates,
    NotOwner,
    StaleEpoch,
    Unavailable,
    UnknownJob,
)
from dlsm.ltc.manifest import RangeDescriptor, RangeManifest
from dlsm.ltc.server import LtcConfig
from dlsm.placement import select_stoc_power_of_d
from dlsm.stoc.server import StoCStats
from rig import Rig


WHOLE = RangeDescriptor(0, b"", None, 1)
LOW = RangeDescriptor(0, b"", b"m", 1)
HIGH = RangeDescriptor(1, b"m", None, 1)


# power-of-d

def stats(outstanding, ewma=0.0):
    return StoCStats(outstanding, ewma, 0, 0)


def test_power_of_d_trivial_cases():
    rng = random.Random(0)
    assert select_stoc_power_of_d([("only", stats(9))], 1, rng) == "only"
    cands = [(f"s{i}", stats(10 - i, 5.0)) for i in range(8)]
    assert all(select_stoc_power_of_d(cands, 8, rng) == "s7" for _ in range(20))
    tie = [("a", stats(1, 50.0)), ("b", stats(1, 10.0))]
    assert select_stoc_power_of_d(tie, 2, rng) == "b"
    with pytest.raises(NoCandidates):
        select_stoc_power_of_d([], 1, rng)
    with pytest.raises(NoCandidates):
        select_stoc_power_of_d(cands, 9, rng)


def test_power_of_d_overloaded_rarely_chosen():
    # exact model: the overloaded StoC wins only if every sampled slot is it,
    # which with distinct samples and d=2 never happens; bound is (1/8)^2 + 0.01
    cands = [(f"s{i}", stats(0)) for i in range(7)] + [("hot", stats(50, 1e4))]
    rng = random.Random(42)
    picks = Counter(select_stoc_power_of_d(cands, 2, rng) for _ in range(10_000))
    assert picks["hot"] / 10_000 <= (1 / 8) ** 2 + 0.01
    rng1 = random.Random(42)
    d1 = Counter(select_stoc_power_of_d(cands, 1, rng1) for _ in range(10_000))
    assert abs(d1["hot"] / 10_000 - 1 / 8) < 0.02


def test_power_of_d_deterministic():
    cands = [(f"s{i}", stats(i % 3)) for i in range(8)]
    a = [select_stoc_power_of_d(cands, 2, r) for r in [random.Random(5)] for _ in range(100)]
    b = [select_stoc_power_of_d(cands, 2, r) for r in [random.Random(5)] for _ in range(100)]
    assert a == b


# basic serving

def test_put_get_delete_scan():
    rig = Rig()
    ltc = rig.ltc()
    ltc.adopt_range(WHOLE)
    assert ltc.scan(b"", None, 10) == ([], None)
    ack = ltc.put(b"a", b"x")
    assert ack == {"seq": 1, "durable": True}
    assert ltc.get(b"a") == b"x"
    assert ltc.get(b"never") is None
    ltc.put(b"b", b"y")
    ltc.delete(b"a")
    assert ltc.get(b"a") is None
    assert ltc.scan(b"", None, 10)[0] == [(b"b", b"y")]
    assert ltc.scan(b"b", b"b\x00", 1)[0] == [(b"b", ltc.get(b"b"))]
    with pytest.raises(InvalidKey):
        ltc.put(b"", b"x")


def test_not_owner_and_scan_resume():
    rig = Rig()
    ltc = rig.ltc()
    ltc.adopt_range(LOW)
    with pytest.raises(NotOwner):
        ltc.put(b"z", b"x")
    with pytest.raises(NotOwner):
        ltc.get(b"z")
    ltc.put(b"a", b"1")
    items, resume = ltc.scan(b"a", None, 10)
    assert items == [(b"a", b"1")] and resume == b"m"
    with pytest.raises(StaleEpoch):
        ltc.adopt_range(LOW)


def test_client_epoch_checks():
    rig = Rig()
    ltc = rig.ltc()
    ltc.adopt_range(RangeDescriptor(0, b"", None, 3))
    ltc.put(b"k", b"v", epoch=3)
    with pytest.raises(StaleEpoch):
        ltc.put(b"k", b"v", epoch=2)
    with pytest.raises(NotOwner):
        ltc.put(b"k", b"v", epoch=4)


# flush

def test_flush_transparency_and_placement():
    rig = Rig()
    ltc = rig.ltc(memtable_bytes=1 << 20, compaction_mode="off")
    ltc.adopt_range(WHOLE)
    with pytest.raises(EmptyMemtable):
        ltc.flush_range(0)
    expected = {}
    for i in range(200):
        k, v = b"k%04d" % i, b"v%d" % i
        ltc.put(k, v)
        expected[k] = v
    before = {k: ltc.get(k) for k in expected}
    (oid,) = ltc.flush_range(0)
    rs = ltc.ranges[0]
    assert len(rs.memtable) == 0 and not rs.immutables
    assert rs.manifest.last_flushed_seq == 200
    assert {k: ltc.get(k) for k in expected} == before == expected
    placed = ltc.placements()[oid]
    assert rig.stocs[placed].backing.size(oid) > 0
    # the log was truncated up to the flushed records
    log_stoc = rs.log_replicas[0]
    assert rig.stocs[log_stoc].backing.log(0).read(1)[1] == []


def test_automatic_rotation_and_flush():
    rig = Rig()
    ltc = rig.ltc(memtable_bytes=4096, compaction_mode="off")
    ltc.adopt_range(WHOLE)
    for i in range(500):
        ltc.put(b"k%04d" % i, b"x" * 40)
        assert ltc.ranges[0].memtable.approx_bytes <= 4096
    rig.settle()
    assert ltc.flushes >= 5
    assert all(ltc.get(b"k%04d" % i) == b"x" * 40 for i in range(500))


def test_flush_then_crash_then_recover_elsewhere():
    rig = Rig()
    a = rig.ltc("ltc-a", memtable_bytes=8192, compaction_mode="off")
    a.adopt_range(WHOLE)
    oracle = {}
    for i in range(600):
        k = b"k%03d" % (i % 300)
        v = None if i % 7 == 0 else b"v%d" % i
        a.put(k, v)
        oracle[k] = v
    a.flush_range(0)
    for i in range(50):
        a.put(b"late%02d" % i, b"L")
        oracle[b"late%02d" % i] = b"L"
    a.crash()
    b = rig.ltc("ltc-b", memtable_bytes=8192, compaction_mode="off")
    res = b.adopt_range(WHOLE.with_epoch(2))
    assert res["replayed"] == 50
    assert all(b.get(k) == v for k, v in oracle.items())


def test_adopt_after_full_flush_replays_nothing():
    rig = Rig()
    a = rig.ltc("ltc-a")
    a.adopt_range(WHOLE)
    for i in range(20):
        a.put(b"k%d" % i, b"v")
    a.release_range(0)  # small memtable: flushed on release
    b = rig.ltc("ltc-b")
    assert b.adopt_range(WHOLE.with_epoch(2))["replayed"] == 0
    assert b.get(b"k3") == b"v"


# release / adopt

def test_release_semantics():
    rig = Rig()
    a = rig.ltc("ltc-a")
    a.adopt_range(WHOLE)
    a.put(b"k", b"v")
    manifest = a.release_range(0)
    with pytest.raises(NotOwner):
        a.put(b"k", b"w")
    with pytest.raises(NotOwner):
        a.release_range(0)
    b = rig.ltc("ltc-b")
    b.adopt_range(WHOLE.with_epoch(2), manifest)
    assert b.get(b"k") == b"v"
    with pytest.raises(StaleEpoch):
        b.adopt_range(WHOLE.with_epoch(2))


def test_release_hands_off_log_when_memtable_large():
    rig = Rig()
    a = rig.ltc("ltc-a", handoff_flush_bytes=0, compaction_mode="off")
    a.adopt_range(WHOLE)
    for i in range(30):
        a.put(b"k%02d" % i, b"v")
    manifest = a.release_range(0)
    assert manifest.last_flushed_seq == 0
    b = rig.ltc("ltc-b", compaction_mode="off")
    assert b.adopt_range(WHOLE.with_epoch(2), manifest)["replayed"] == 30
    assert b.get(b"k29") == b"v"


def test_deposed_owner_is_fenced():
    rig = Rig()
    a = rig.ltc("ltc-a")
    a.adopt_range(WHOLE)
    a.put(b"k", b"1")
    b = rig.ltc("ltc-b")
    b.adopt_range(WHOLE.with_epoch(2))  # a never released: b fences the StoCs
    with pytest.raises(NotOwner):
        a.put(b"k", b"stale")
    assert b.get(b"k") == b"1"
    b.put(b"k", b"2")
    assert b.get(b"k") == b"2"


def test_log_unavailable_with_r1():
    rig = Rig()
    ltc = rig.ltc(log_replicas=1)
    ltc.adopt_range(WHOLE)
    log_stoc = ltc.ranges[0].log_replicas[0]
    rig.net.partition("ltc-a", log_stoc, 1.0)
    with pytest.raises(Unavailable):
        ltc.put(b"k", b"v")
    rig.rt.run_for(1.0)
    ltc.put(b"k", b"v")
    assert ltc.get(b"k") == b"v"


def test_log_replication_r3():
    rig = Rig()
    ltc = rig.ltc(log_replicas=3)
    ltc.adopt_range(WHOLE)
    ltc.put(b"k", b"v")
    assert len(ltc.ranges[0].log_replicas) == 3
    for s in rig.stocs.values():
        assert len(s.backing.log(0).read(1)[1]) == 1


# compaction

def fill_l0(ltc, n_files, per_file=40, base=0):
    for f in range(n_files):
        for i in range(per_file):
            ltc.put(b"k%04d" % ((base + f * 7 + i) % 200), b"f%d-%d" % (f, i))
        ltc.flush_range(0)


def test_compaction_scheduling_policy():
    rig = Rig(n_workers=1)
    ltc = rig.ltc(compaction_mode="remote", l0_trigger=4)
    ltc.adopt_range(WHOLE)
    assert ltc.maybe_schedule_compaction(0, dispatch=False) is None
    ltc.config = LtcConfig(**{**ltc.config.__dict__, "compaction_mode": "off"})
    fill_l0(ltc, 4)
    ltc.config = LtcConfig(**{**ltc.config.__dict__, "compaction_mode": "remote"})
    job = ltc.maybe_schedule_compaction(0, dispatch=False)
    assert job is not None and len(job.inputs) == 4 and job.target_level == 1
    # inputs are pending: no second job over them
    assert ltc.maybe_schedule_compaction(0, dispatch=False) is None


def test_apply_result_idempotent_and_semantics_preserving():
    rig = Rig(n_workers=1)
    ltc = rig.ltc(compaction_mode="off")
    ltc.adopt_range(WHOLE)
    fill_l0(ltc, 4)
    keys = [b"k%04d" % i for i in range(200)]
    before = {k: ltc.get(k) for k in keys}
    from dlsm.jobs import execute_job
    ltc.config = LtcConfig(**{**ltc.config.__dict__, "compaction_mode": "remote"})
    job = ltc.maybe_schedule_compaction(0, dispatch=False)
    result = execute_job(job, ltc.stocs)
    ltc.apply_compaction_result(0, result)
    assert {k: ltc.get(k) for k in keys} == before
    assert len(ltc.ranges[0].manifest.levels.level(0)) == 0
    with pytest.raises(UnknownJob):
        ltc.apply_compaction_result(0, result)


def test_gc_leaves_exactly_the_live_set():
    rig = Rig(n_workers=2)
    ltc = rig.ltc(memtable_bytes=4096, l0_trigger=2, level_base_bytes=8192, max_output_bytes=4096)
    ltc.adopt_range(WHOLE)
    rng = random.Random(0)
    for i in range(3000):
        ltc.put(b"k%04d" % rng.randrange(800), rng.randbytes(30))
    rig.settle(5.0)
    assert ltc.jobs_done > 0
    ltc.gc_sweep()
    rig.settle(1.0)
    live = {(s, oid) for oid, s in ltc.placements().items()}
    assert rig.stored(0) == live


def test_orphan_outputs_of_stale_job_are_collected():
    rig = Rig(n_workers=1)
    ltc = rig.ltc(compaction_mode="off")
    ltc.adopt_range(WHOLE)
    fill_l0(ltc, 4)
    ltc.config = LtcConfig(**{**ltc.config.__dict__, "compaction_mode": "remote"})
    job = ltc.maybe_schedule_compaction(0, dispatch=False)
    from dlsm.jobs import execute_job
    execute_job(job, ltc.stocs)  # outputs written, result never applied
    ltc.ranges[0].pending.clear()
    ltc.gc_sweep()
    live = {(s, oid) for oid, s in ltc.placements().items()}
    assert rig.stored(0) == live


def test_randomized_flush_compact_schedule_matches_oracle():
    rig = Rig(n_workers=2)
    ltc = rig.ltc(memtable_bytes=8192, l0_trigger=3, level_base_bytes=16384, max_output_bytes=8192)
    ltc.adopt_range(LOW)
    ltc.adopt_range(HIGH)
    rng = random.Random(9)
    oracle = SortedDict()
    keys = [bytes([rng.randrange(97, 123)]) + rng.randbytes(3) for _ in range(1500)]
    for step in range(20_000):
        k = rng.choice(keys)
        r = rng.random()
        if r < 0.4:
            v = rng.randbytes(rng.randint(0, 50))
            ltc.put(k, v)
            oracle[k] = v
        elif r < 0.5:
            ltc.delete(k)
            oracle.pop(k, None)
        else:
            assert ltc.get(k) == oracle.get(k)
        if step % 2500 == 0:
            rid = rng.choice([0, 1])
            try:
                ltc.flush_range(rid)
            except EmptyMemtable:
                pass
        if step % 4000 == 0:
            rig.settle(0.5)
            ltc.compact_full(rng.choice([0, 1]))
    rig.settle(5.0)
    for k in keys:
        assert ltc.get(k) == oracle.get(k)
    items, resume = ltc.scan(b"a", None, 10_000)
    assert items == [(k, oracle[k]) for k in oracle.irange(b"a", b"m", inclusive=(True, False))]


def test_manifest_persisted_and_discoverable():
    rig = Rig()
    a = rig.ltc("ltc-a", compaction_mode="off")
    a.adopt_range(WHOLE)
    a.put(b"k", b"v")
    a.flush_range(0)
    version = a.ranges[0].manifest.version
    manifests = [oid for s in rig.stocs.values() for oid, _ in s.backing.list(0) if oid.is_manifest]
    assert len(manifests) == 1
    raw = next(s.backing.read(oid, 0, s.backing.size(oid)) for s in rig.stocs.values()
               for oid, _ in s.backing.list(0) if oid.is_manifest)
    m = RangeManifest.decode(raw)
    assert m.version == version and m.last_flushed_seq == 1
    assert RangeManifest.decode(m.encode()) == m
