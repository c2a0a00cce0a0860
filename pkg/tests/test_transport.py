import random
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlsm.errors import (
    ConnectionFailed,
    Oversize,
    ProtocolError,
    RealBackend,
    Timeout,
    UnknownOpcode,
)
from dlsm.transport.frame import HEADER_SIZE, MAX_FRAME, Frame, Op, pack, unpack
from dlsm.transport.runtime import SimRuntime
from dlsm.transport.service import Rpc, Service
from dlsm.transport.sim import SimNetwork, sim_partition
from dlsm.transport.tcp import FrameServer, TcpTransport

KNOWN = [int(op) for op in Op]


@settings(max_examples=300)
@given(st.sampled_from(KNOWN), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
       st.binary(max_size=300), st.booleans())
def test_frame_roundtrip(kind, rid, epoch, payload, response):
    fr = Frame(kind | (0x8000 if response else 0), rid, epoch, payload)
    raw = fr.encode()
    assert len(raw) == HEADER_SIZE + len(payload)
    assert struct.unpack_from("<I", raw, 4)[0] == len(raw)
    assert Frame.decode(raw) == fr


@settings(max_examples=500)
@given(st.binary(max_size=80))
def test_frame_decode_fuzz(raw):
    try:
        fr = Frame.decode(raw)
    except (ProtocolError, UnknownOpcode, Oversize):
        return
    assert fr.encode() == raw


def test_frame_rejections():
    with pytest.raises(UnknownOpcode):
        Frame.decode(Frame(0x0777, 1).encode())
    raw = bytearray(Frame(int(Op.ECHO), 1).encode())
    raw[0] ^= 1
    with pytest.raises(ProtocolError):
        Frame.decode(bytes(raw))
    with pytest.raises(ProtocolError):
        Frame.decode(Frame(int(Op.ECHO), 1).encode()[:10])
    with pytest.raises(Oversize):
        Frame(int(Op.ECHO), 1, 0, b"x" * MAX_FRAME).encode()
    Frame(int(Op.ECHO), 1, 0, b"x" * (MAX_FRAME - HEADER_SIZE)).encode()


class Echoish(Service):
    name = "echoish"

    def __init__(self, delay=None):
        super().__init__()
        self.delay = delay
        self.route(Op.GET, self._get)

    def _get(self, args, frame):
        if self.delay:
            self.delay()
        return {"v": args["k"], "rid": frame.request_id}


# simulator backend

def sim_pair(seed=0, base=20e-6, jitter=5e-6):
    rt = SimRuntime()
    net = SimNetwork(rt, seed, base, jitter)
    net.register("srv", Echoish())
    return rt, net, Rpc(net.transport("cli"))


def test_sim_echo_roundtrip():
    rt, net, rpc = sim_pair()
    assert rpc.call("srv", Op.ECHO, {"a": b"b"}) == {"a": b"b"}
    assert rpc.call("srv", Op.GET, {"k": b"x"})["v"] == b"x"
    with pytest.raises(UnknownOpcode):
        rpc.call("srv", Op.PUT, {})


def test_sim_injected_latency_rtt():
    rt, net, rpc = sim_pair()
    net.set_edge("cli", "srv", 5e-3)
    t0 = rt.now()
    rpc.call("srv", Op.ECHO, {})
    assert rt.now() - t0 >= 5e-3


def test_sim_determinism():
    def trace(seed):
        rt, net, rpc = sim_pair(seed, 20e-6, 50e-6)
        out = []
        for i in range(50):
            rpc.call("srv", Op.ECHO, i)
            out.append(rt.now())
        return out
    assert trace(3) == trace(3)
    assert trace(3) != trace(4)


def test_sim_partition():
    rt, net, rpc = sim_pair()
    net.register("other", Echoish())
    tr = net.transport("cli")
    sim_partition(tr, "cli", "srv", 0.0)
    rpc.call("srv", Op.ECHO, 1)
    sim_partition(tr, "cli", "srv", 1.0)
    with pytest.raises(ConnectionFailed):
        rpc.call("srv", Op.ECHO, 1)
    assert rpc.call("other", Op.ECHO, 2) == 2
    rt.run_for(1.0)
    assert rpc.call("srv", Op.ECHO, 3) == 3


def test_sim_timeout_and_dead_endpoint():
    rt, net, rpc = sim_pair()
    net.set_edge("srv", "cli", 0.5)
    with pytest.raises(Timeout):
        rpc.call("srv", Op.ECHO, 1, timeout=0.1)
    net.kill("srv")
    with pytest.raises(ConnectionFailed):
        rpc.call("srv", Op.ECHO, 1)
    with pytest.raises(ConnectionFailed):
        rpc.call("nowhere", Op.ECHO, 1)


def test_sim_oversize_before_send():
    rt, net, rpc = sim_pair()
    calls = net.calls
    with pytest.raises(Oversize):
        rpc.call("srv", Op.ECHO, b"x" * MAX_FRAME)
    assert net.calls == calls


# TCP backend

@pytest.fixture
def tcp_server():
    rng = random.Random(0)
    lock = threading.Lock()

    def jitter():
        with lock:
            d = rng.random() * 0.0005
        time.sleep(d)

    srv = FrameServer(Echoish(jitter), workers=32).start()
    yield srv
    srv.close()


def test_tcp_echo(tcp_server):
    t = TcpTransport()
    rpc = Rpc(t)
    assert rpc.call(tcp_server.address, Op.ECHO, {"x": [1, 2]}) == {"x": [1, 2]}
    with pytest.raises(UnknownOpcode):
        rpc.call(tcp_server.address, Op.PUT, {})
    with pytest.raises(RealBackend):
        sim_partition(t, "a", "b", 1.0)
    t.close()


def test_tcp_concurrent_calls_no_mixups(tcp_server):
    t = TcpTransport()
    rpc = Rpc(t, default_timeout=30)
    addr = tcp_server.address

    def one(i):
        key = b"k%06d" % i
        res = rpc.call(addr, Op.GET, {"k": key})
        return res["v"] == key

    with ThreadPoolExecutor(64) as pool:
        results = list(pool.map(one, range(10_000)))
    assert all(results)
    assert len(t._conns) == 1
    t.close()


def test_tcp_oversize_keeps_connection(tcp_server):
    t = TcpTransport()
    rpc = Rpc(t)
    with pytest.raises(Oversize):
        rpc.call(tcp_server.address, Op.ECHO, b"x" * MAX_FRAME)
    assert rpc.call(tcp_server.address, Op.ECHO, 5) == 5
    # a peer that lies about the size gets an error frame, not a dropped socket
    sock = socket.create_connection(("127.0.0.1", int(tcp_server.address.rsplit(":", 1)[1])))
    header = struct.pack("<IIQHQ", 0x4E564C53, MAX_FRAME + 100, 9, int(Op.ECHO), 0)
    sock.sendall(header + b"\0" * (MAX_FRAME + 100 - HEADER_SIZE))
    reply = sock.recv(HEADER_SIZE)
    while len(reply) < HEADER_SIZE:
        reply += sock.recv(HEADER_SIZE - len(reply))
    _, n, rid, kind, _ = struct.unpack("<IIQHQ", reply)
    assert kind == 0xFFFF and rid == 9
    body = b""
    while len(body) < n - HEADER_SIZE:
        body += sock.recv(n - HEADER_SIZE - len(body))
    assert unpack(body)["code"] == Oversize.code
    sock.sendall(Frame(int(Op.ECHO), 10, 0, pack(7)).encode())
    reply = sock.recv(1024)
    assert Frame.decode(reply).request_id == 10
    sock.close()
    t.close()


def test_tcp_timeout_and_refused():
    srv = FrameServer(Echoish(lambda: time.sleep(0.3))).start()
    t = TcpTransport()
    with pytest.raises(Timeout):
        Rpc(t).call(srv.address, Op.GET, {"k": b"a"}, timeout=0.05)
    addr = srv.address
    srv.close()
    t.close()
    with pytest.raises(ConnectionFailed):
        Rpc(TcpTransport(connect_timeout=0.5)).call(addr, Op.ECHO, 1)
