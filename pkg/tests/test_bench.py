import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlsm.bench import (
    OpGenerator,
    Recorder,
    RunMetrics,
    WorkloadSpec,
    ZipfianGenerator,
    emit_report,
    item_key,
    percentiles,
    run_workload,
    scrambled_zipf_pmf,
)
from dlsm.bench.report import BASE_COLUMNS, render_csv
from dlsm.cluster import ClusterConfig, DevCluster
from dlsm.coordinator import route
from dlsm.errors import InvalidConfig, IoError


def fnv1a64_oracle(value: int) -> int:
    h = 0xCBF29CE484222325
    for byte in value.to_bytes(8, "little"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def analytic_pmf(n, theta):
    weights = [1.0 / (i + 1) ** theta for i in range(n)]
    total = math.fsum(weights)
    pmf = [0.0] * n
    for rank, w in enumerate(weights):
        pmf[fnv1a64_oracle(rank) % n] += w / total
    return pmf


def test_spec_validation_and_json():
    spec = WorkloadSpec(read_fraction=0.3, scan_fraction=0.1, delete_fraction=0.1, distribution="zipfian")
    assert WorkloadSpec.from_json(spec.to_json()) == spec
    assert math.isclose(spec.write_fraction, 0.5)
    for bad in [dict(read_fraction=1.2), dict(read_fraction=0.6, scan_fraction=0.6),
                dict(distribution="zipfian", theta=1.0), dict(distribution="pareto"), dict(key_count=0),
                dict(client_threads=0)]:
        with pytest.raises(InvalidConfig):
            WorkloadSpec(**bad).validate()
    with pytest.raises(InvalidConfig):
        WorkloadSpec.from_json('{"reads": 1}')


def test_generator_deterministic_per_seed():
    spec = WorkloadSpec(read_fraction=0.4, scan_fraction=0.1, delete_fraction=0.1, distribution="zipfian",
                        seed=7, value_size_bytes=16)
    a = OpGenerator(spec, 3).take(3000)
    assert a == OpGenerator(spec, 3).take(3000)
    assert a != OpGenerator(spec, 4).take(3000)
    spec2 = WorkloadSpec(**{**spec.__dict__, "seed": 8})
    assert a != OpGenerator(spec2, 3).take(3000)
    kinds = [op[0] for op in a]
    assert abs(kinds.count("read") / 3000 - 0.4) < 0.05
    assert all(len(op[2]) == 16 for op in a if op[0] == "write")


def test_partitioned_clients_touch_disjoint_keys():
    spec = WorkloadSpec(key_count=1000, seed=1)
    sets = [{op[1] for op in OpGenerator(spec, i, (i, 4)).take(2000)} for i in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not sets[i] & sets[j]


def test_item_hash_matches_oracle():
    from dlsm.bench.workload import fnv1a64
    vals = [0, 1, 255, 2**32 + 7, 2**63 + 5]
    assert [int(h) for h in fnv1a64(vals)] == [fnv1a64_oracle(v) for v in vals]
    assert len({item_key(i) for i in range(10_000)}) == 10_000


def test_zipfian_top10_matches_analytic():
    n, theta = 10_000, 0.99
    pmf = analytic_pmf(n, theta)
    assert np.allclose(scrambled_zipf_pmf(n, theta), pmf, rtol=1e-9, atol=1e-15)
    draws = ZipfianGenerator(n, theta, seed=123).draw(1_000_000)
    freq = np.bincount(draws, minlength=n) / 1_000_000
    top = sorted(range(n), key=lambda i: -pmf[i])[:10]
    # per-key error measured against the hottest key's probability
    worst = max(abs(freq[i] - pmf[i]) for i in top) / pmf[top[0]]
    assert worst <= 0.01


def test_unscrambled_ranks_follow_zipf():
    g = ZipfianGenerator(100, 0.5, seed=0, scrambled=False)
    counts = np.bincount(g.draw(200_000), minlength=100)
    assert counts[0] > counts[1] > counts[10] > counts[99]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e7, allow_nan=False), max_size=300))
def test_percentiles_monotone(values):
    p50, p90, p99 = percentiles(values)
    assert p50 <= p90 <= p99
    if values:
        assert min(values) <= p50 and p99 <= max(values)
        assert p99 in values  # nearest-rank: an observed value
    else:
        assert (p50, p90, p99) == (0.0, 0.0, 0.0)


def test_recorder_seconds_and_percentiles():
    rec = Recorder(10.0)
    rng = random.Random(0)
    for _ in range(5000):
        t0 = 10.0 + rng.random() * 2.98
        rec.record(rng.choice(["read", "write"]), t0, t0 + rng.random() * 0.01, ok=rng.random() > 0.01)
    m = rec.finish(13.0)
    assert [r.second for r in m.seconds] == [0, 1, 2]
    assert sum(r.ops for r in m.seconds) == m.total_ops
    assert sum(r.errors for r in m.seconds) == m.errors
    assert all(r.p50_us <= r.p90_us <= r.p99_us for r in m.seconds)


def test_report_empty_and_deterministic(tmp_path):
    empty = RunMetrics()
    assert render_csv(empty) == ",".join(BASE_COLUMNS) + "\n"
    paths = emit_report(empty, str(tmp_path / "empty"))
    assert set(paths) == {"metrics.csv", "plot.gp", "summary.md"}

    rec = Recorder(0.0)
    for i in range(700):
        rec.record("read", i / 100, i / 100 + 0.001)
    rec.sample(0.5, 2.0, 1, {"ltc-0": 0.5})
    m = rec.finish(7.0)
    out1 = emit_report(m, str(tmp_path / "a"))
    out2 = emit_report(m, str(tmp_path / "b"))
    for name in out1:
        assert open(out1[name], "rb").read() == open(out2[name], "rb").read()
    lines = open(out1["metrics.csv"]).read().splitlines()
    assert len(lines) - 1 == 7 and lines[0].endswith("util_ltc-0")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        emit_report(m, str(blocker / "sub"))


def cluster(**kw):
    base = dict(n_ltcs=2, n_stocs=3, n_workers=1, n_ranges=8, memtable_bytes=16384,
                level_base_bytes=65536, max_output_bytes=16384)
    base.update(kw)
    return DevCluster(ClusterConfig(**base))


def test_reads_on_empty_store():
    c = cluster()
    m = run_workload(WorkloadSpec(read_fraction=1.0, ops=2000, client_threads=4), c, verify=True)
    assert m.total_ops == 2000 and m.errors == 0 and not m.mismatches
    assert m.oracle_checks == 2000


def test_verify_mode_finds_no_mismatch():
    c = cluster(memtable_bytes=4096, l0_trigger=2)
    spec = WorkloadSpec(read_fraction=0.4, scan_fraction=0.05, delete_fraction=0.1, key_count=2000,
                        value_size_bytes=32, ops=20_000, client_threads=1, seed=3)
    m = run_workload(spec, c, verify=True)
    assert m.total_ops == 20_000 and not m.mismatches
    assert m.oracle_checks > 8000
    assert c.placements()  # flushes happened along the way


def test_zipfian_hottest_range_gets_most_load():
    c = cluster(n_ranges=16)
    spec = WorkloadSpec(read_fraction=0.5, distribution="zipfian", key_count=5000, ops=20_000,
                        client_threads=4, seed=2)
    run_workload(spec, c)
    ops = {}
    for ltc in c.ltcs.values():
        for rid, rs in ltc.ranges.items():
            ops[rid] = rs.ops
    pmf = scrambled_zipf_pmf(5000, 0.99)
    hottest_item = int(np.argmax(pmf))
    hot_range = route(c.coordinator.view, item_key(hottest_item))[0]
    mass = {}
    for item, p in enumerate(pmf):
        r = route(c.coordinator.view, item_key(item))[0]
        mass[r] = mass.get(r, 0.0) + p
    assert max(ops, key=ops.get) == max(mass, key=mass.get)
    assert ops[hot_range] >= sorted(ops.values())[len(ops) // 2]
