import os
import random
import signal
from concurrent.futures import ThreadPoolExecutor

import pytest

from conftest import free_port, wait_port
from dlsm.errors import AlreadyExists, NotFound, OutOfRange, OutOfSpace, StaleEpoch
from dlsm.ids import ObjectId
from dlsm.stoc.backing import RECORD_HEADER
from dlsm.stoc.client import StocClient
from dlsm.stoc.server import StoC, StoCConfig
from dlsm.transport import FrameServer, RealRuntime, TcpTransport
from dlsm.transport.runtime import SimRuntime
from dlsm.transport.service import Rpc
from dlsm.transport.sim import SimNetwork


def sim_stoc(**cfg):
    rt = SimRuntime()
    net = SimNetwork(rt, 0)
    stoc = StoC(rt, StoCConfig(**cfg), "s")
    net.register("s", stoc)
    return rt, net, stoc, StocClient(Rpc(net.transport("c")), rt)


def test_object_roundtrip_and_immutability():
    rt, net, stoc, c = sim_stoc()
    oid = ObjectId(1, 7)
    blob = bytes(range(256)) * 4
    c.put_object("s", oid, blob)
    assert c.get_object("s", oid) == blob
    assert c.get_object("s", oid, len(blob) - 64, 64) == blob[-64:]
    assert c.stat_object("s", oid) == len(blob)
    with pytest.raises(AlreadyExists):
        c.put_object("s", oid, b"other bytes")
    # an identical retry is acknowledged without a second copy
    assert c.put_object("s", oid, blob).get("dup")
    assert c.get_object("s", oid) == blob
    with pytest.raises(OutOfRange):
        c.get_object("s", oid, len(blob) - 1, 5)
    c.delete_object("s", oid)
    with pytest.raises(NotFound):
        c.get_object("s", oid)
    with pytest.raises(NotFound):
        c.delete_object("s", ObjectId(9, 9))


def test_partial_read_fuzz():
    rt, net, stoc, c = sim_stoc()
    rng = random.Random(0)
    blob = rng.randbytes(5000)
    c.put_object("s", ObjectId(0, 1), blob)
    for _ in range(200):
        off = rng.randrange(len(blob))
        n = rng.randrange(len(blob) - off + 1)
        assert c.get_object("s", ObjectId(0, 1), off, n) == blob[off:off + n]


def test_capacity():
    rt, net, stoc, c = sim_stoc(capacity_bytes=100)
    c.put_object("s", ObjectId(0, 1), b"x" * 80)
    with pytest.raises(OutOfSpace):
        c.put_object("s", ObjectId(0, 2), b"x" * 30)


def test_log_operations_and_history_oracle():
    rt, net, stoc, c = sim_stoc()
    with pytest.raises(NotFound):
        c.read_log("s", 5)
    assert [c.append_log("s", 5, b"r%d" % i) for i in range(3)] == [1, 2, 3]
    assert c.read_log("s", 5, 2) == (2, [b"r1", b"r2"])
    assert c.read_log("s", 5, 99)[1] == []
    c.truncate_log("s", 5, 0)
    assert len(c.read_log("s", 5)[1]) == 3
    rng = random.Random(1)
    history = {1: b"r0", 2: b"r1", 3: b"r2"}
    lsn = 3
    floor = 0
    for _ in range(300):
        if rng.random() < 0.8:
            lsn += 1
            rec = rng.randbytes(8)
            assert c.append_log("s", 5, rec) == lsn
            history[lsn] = rec
        else:
            floor = rng.randint(floor, lsn)
            c.truncate_log("s", 5, floor)
        _, recs = c.read_log("s", 5, 1)
        assert recs == [history[i] for i in range(floor + 1, lsn + 1)]
    c.truncate_log("s", 5, lsn)
    assert c.read_log("s", 5)[1] == []


def test_stats_track_load():
    rt, net, stoc, c = sim_stoc(inject_latency_us=10_000)
    assert stoc.stats().outstanding_requests == 0
    c.put_object("s", ObjectId(0, 1), b"abc")
    st = c.stats("s")
    assert st.ewma_latency_us >= 10_000
    assert (st.bytes_stored, st.object_count) == (3, 1)
    # a burst spawned at the same instant queues on the StoC
    ends = []
    for i in range(20):
        rt.spawn(lambda i=i: ends.append(c.append_log("s", 1, b"x")))
    rt.run_for(0.0)
    assert stoc.stats().outstanding_requests > 0
    rt.run_for(1.0)
    assert stoc.stats().outstanding_requests == 0


def test_epoch_fencing():
    rt, net, stoc, c = sim_stoc()
    c.fence("s", 3, 5)
    with pytest.raises(StaleEpoch):
        c.append_log("s", 3, b"x", epoch=4)
    with pytest.raises(StaleEpoch):
        c.put_object("s", ObjectId(3, 1), b"x", epoch=4)
    c.append_log("s", 3, b"x", epoch=5)
    c.append_log("s", 3, b"y", epoch=6)
    with pytest.raises(StaleEpoch):
        c.truncate_log("s", 3, 1, epoch=5)
    # other ranges are unaffected
    c.append_log("s", 4, b"z", epoch=1)


@pytest.fixture
def tcp_stoc(tmp_path):
    stoc = StoC(RealRuntime(), StoCConfig(tier="disk", directory=str(tmp_path), service_time_us=0), "s")
    srv = FrameServer(stoc, workers=32).start()
    t = TcpTransport()
    yield stoc, srv.address, StocClient(Rpc(t, 30))
    t.close()
    srv.close()
    stoc.close()


def test_concurrent_puts(tcp_stoc):
    stoc, addr, c = tcp_stoc
    blobs = {ObjectId(1, i): os.urandom(100 + i) for i in range(100)}
    with ThreadPoolExecutor(16) as pool:
        list(pool.map(lambda kv: c.put_object(addr, *kv), blobs.items()))
    for oid, b in blobs.items():
        assert c.get_object(addr, oid) == b
    st = c.stats(addr)
    assert st.bytes_stored == sum(len(b) for b in blobs.values())
    assert st.object_count == 100


def test_concurrent_appends_dense_lsns(tcp_stoc):
    stoc, addr, c = tcp_stoc

    def writer(w):
        return [(c.append_log(addr, 9, b"%d:%d" % (w, i)), b"%d:%d" % (w, i)) for i in range(2500)]

    with ThreadPoolExecutor(4) as pool:
        results = [r for part in pool.map(writer, range(4)) for r in part]
    lsns = sorted(l for l, _ in results)
    assert lsns == list(range(1, 10_001))
    _, recs = c.read_log(addr, 9)
    by_lsn = dict(results)
    assert recs == [by_lsn[i] for i in range(1, 10_001)]
    # per writer, LSN order follows issue order
    for w in range(4):
        mine = [l for l, r in results if r.startswith(b"%d:" % w)]
        assert mine == sorted(mine)


def test_memory_tier_loses_data_on_restart():
    rt, net, stoc, c = sim_stoc()
    c.put_object("s", ObjectId(0, 1), b"abc")
    stoc.restart()
    with pytest.raises(NotFound):
        c.get_object("s", ObjectId(0, 1))


def test_disk_tier_restart_and_torn_tail(tmp_path):
    rt = SimRuntime()
    net = SimNetwork(rt, 0)
    stoc = StoC(rt, StoCConfig(tier="disk", directory=str(tmp_path)), "s")
    net.register("s", stoc)
    c = StocClient(Rpc(net.transport("c")), rt)
    c.put_object("s", ObjectId(2, 1), b"object")
    for i in range(5):
        c.append_log("s", 2, b"rec%d" % i)
    c.truncate_log("s", 2, 2)
    c.fence("s", 2, 7)
    seg = tmp_path / "logs" / "2.log.0"
    with open(seg, "ab") as fh:  # half-written record
        fh.write(RECORD_HEADER.pack(6, 100, 0) + b"partial")
    stoc.restart()
    assert c.get_object("s", ObjectId(2, 1)) == b"object"
    assert c.read_log("s", 2) == (3, [b"rec2", b"rec3", b"rec4"])
    assert c.append_log("s", 2, b"rec5", epoch=7) == 6
    with pytest.raises(StaleEpoch):
        c.append_log("s", 2, b"old", epoch=6)
    stoc.restart()
    assert c.read_log("s", 2, 6) == (6, [b"rec5"])
    assert c.stats("s").object_count == 1


def test_disk_tier_survives_process_kill(tmp_path, spawn):
    port = free_port()
    addr = f"127.0.0.1:{port}"
    args = ["stoc", "--listen", addr, "--tier", "disk", "--dir", str(tmp_path)]
    p = spawn(*args)
    wait_port(port)
    t = TcpTransport()
    c = StocClient(Rpc(t, 10))
    acked_objects = {}
    acked_log = []
    for i in range(30):
        blob = os.urandom(200 + i)
        c.put_object(addr, ObjectId(4, i), blob)
        acked_objects[ObjectId(4, i)] = blob
        rec = b"log-%d" % i
        acked_log.append((c.append_log(addr, 4, rec), rec))
    p.send_signal(signal.SIGKILL)
    p.wait()
    t.close()
    spawn(*args)
    wait_port(port)
    t = TcpTransport()
    c = StocClient(Rpc(t, 10))
    for oid, blob in acked_objects.items():
        assert c.get_object(addr, oid) == blob
    _, recs = c.read_log(addr, 4)
    assert recs == [r for _, r in acked_log]
    t.close()
