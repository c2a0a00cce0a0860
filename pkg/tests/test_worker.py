import random

import pytest

from dlsm.core.levels import TableHandle
from dlsm.core.sstable import SSTableData, decode_sstable, encode_sstable
from dlsm.errors import Busy, Crashed
from dlsm.ids import ObjectId, flush_file_no
from dlsm.jobs import CompactionJob, CompactionResult, execute_job
from dlsm.ltc.manifest import RangeDescriptor
from dlsm.stoc.client import StocClient
from dlsm.transport.frame import Op
from dlsm.transport.service import Rpc
from dlsm.worker import WorkerConfig
from rig import Rig


def random_tables(rng, n_tables, n_keys=300, per_table=150):
    """Sorted runs with globally unique sequence numbers, newest table first."""
    seq = 1
    tables = []
    for _ in range(n_tables):
        keys = sorted(rng.sample(range(n_keys), per_table))
        entries = []
        for k in keys:
            v = None if rng.random() < 0.1 else rng.randbytes(rng.randint(0, 40))
            entries.append((b"key%05d" % k, seq, v))
            seq += 1
        tables.append(SSTableData(tuple(entries)))
    return tables[::-1]


def upload(rig, tables, range_id=0, epoch=1):
    handles = []
    for i, data in enumerate(tables):
        oid = ObjectId(range_id, flush_file_no(epoch, 100 + i))
        stoc = list(rig.stocs)[i % len(rig.stocs)]
        raw = encode_sstable(data)
        rig.stocs[stoc].backing.put(oid, raw)
        handles.append(TableHandle(oid, stoc, len(raw), data.min_key, data.max_key,
                                   data.min_seq, data.max_seq, data.entry_count))
    return handles


def make_job(rig, handles, seq=1, purge=False, max_out=1 << 20, epoch=1, range_id=0):
    return CompactionJob(f"{range_id}:{epoch}:{seq}", range_id, epoch, seq, handles, 1, purge,
                         max_out, 4096, 10, {"d": 2}, list(rig.stocs))


def client(rig, name="tester"):
    return StocClient(Rpc(rig.net.transport(name), 10.0), rig.rt)


def outputs_bytes(rig, result):
    return [rig.stocs[h.stoc].backing.read(h.object_id, 0, h.size) for h in result.outputs]


def call_worker(rig, worker, job):
    resp = Rpc(rig.net.transport("tester"), None).call(worker, Op.EXECUTE_JOB, job.to_wire(), epoch=job.epoch)
    resp.pop("_q", None)
    return CompactionResult.from_wire(resp)


def test_single_input_identity():
    rig = Rig(n_workers=1)
    (data,) = random_tables(random.Random(1), 1)
    handles = upload(rig, [data])
    result = call_worker(rig, "worker-0", make_job(rig, handles))
    out = [e for raw in outputs_bytes(rig, result) for e in decode_sstable(raw).entries]
    assert tuple(out) == data.entries
    assert result.entries_dropped == 0


def test_remote_matches_local_byte_for_byte():
    for seed in range(10):
        rng = random.Random(seed)
        tables = random_tables(rng, rng.randint(1, 5))
        purge = rng.random() < 0.5
        max_out = rng.choice([2048, 8192, 1 << 20])

        local_rig = Rig()
        job = make_job(local_rig, upload(local_rig, tables), purge=purge, max_out=max_out)
        local = execute_job(job, client(local_rig))

        remote_rig = Rig(n_workers=1)
        job = make_job(remote_rig, upload(remote_rig, tables), purge=purge, max_out=max_out)
        remote = call_worker(remote_rig, "worker-0", job)

        assert [h.object_id for h in local.outputs] == [h.object_id for h in remote.outputs]
        assert outputs_bytes(local_rig, local) == outputs_bytes(remote_rig, remote)


def test_crash_mid_job_then_retry_is_identical():
    rig = Rig(n_workers=2)
    tables = random_tables(random.Random(3), 4)
    job = make_job(rig, upload(rig, tables), max_out=2048)
    w0 = rig.net.services["worker-0"]
    w0.faults.arm("worker.after_outputs")
    with pytest.raises(Crashed):
        w0.execute(job)
    written = {(n, oid): s.backing.read(oid, 0, s.backing.size(oid))
               for n, s in rig.stocs.items() for oid, _ in s.backing.list(0) if oid.is_compaction_output}
    assert written
    result = call_worker(rig, "worker-1", job)
    again = {(h.stoc, h.object_id): raw for h, raw in zip(result.outputs, outputs_bytes(rig, result))}
    # every output the crashed run left behind has the retry's exact bytes
    by_id = {oid: raw for (_, oid), raw in again.items()}
    assert all(by_id[oid] == raw for (_, oid), raw in written.items())


def test_jobs_complete_exactly_once_across_workers():
    rig = Rig(n_workers=3)
    for w in rig.workers:
        rig.net.services[w].faults.arm("worker.after_outputs", after=2)
    ltc = rig.ltc(memtable_bytes=4096, l0_trigger=2, level_base_bytes=8192, max_output_bytes=4096)
    for r in range(4):
        lo = b"" if r == 0 else bytes([ord("a") + 6 * r])
        hi = None if r == 3 else bytes([ord("a") + 6 * (r + 1)])
        ltc.adopt_range(RangeDescriptor(r, lo, hi, 1))
    rng = random.Random(4)
    oracle = {}
    for _ in range(6000):
        k = bytes([rng.randrange(97, 123)]) + b"%03d" % rng.randrange(300)
        v = rng.randbytes(24)
        ltc.put(k, v)
        oracle[k] = v
    rig.settle(20.0)
    assert all(rig.net.services[w].faults.fired for w in rig.workers)
    for w in rig.workers:  # bring crashed workers back
        rig.net.register(w, rig.net.services[w])
        rig.net.services[w].restart()
    rig.settle(20.0)
    made = sum(rs.manifest.next_job - 1 for rs in ltc.ranges.values())
    assert all(not rs.pending for rs in ltc.ranges.values())
    assert ltc.jobs_done == made
    assert all(ltc.get(k) == v for k, v in oracle.items())


def test_busy_when_queue_full():
    rig = Rig(n_workers=1, worker_config=WorkerConfig(max_concurrent=1, max_queue=0, cost_per_byte=1e-3))
    tables = random_tables(random.Random(5), 2)
    handles = upload(rig, tables)
    worker = rig.net.services["worker-0"]
    outcomes = []

    def run(seq):
        try:
            worker.execute(make_job(rig, handles, seq=seq))
            outcomes.append("ok")
        except Busy:
            outcomes.append("busy")

    rig.rt.spawn_at(0.0, lambda: run(1))
    rig.rt.spawn_at(0.001, lambda: run(2))
    rig.rt.run_for(100.0)
    assert outcomes == ["ok", "busy"]
    assert worker.queue_depth() == 0
    run(3)
    assert outcomes[-1] == "ok"
