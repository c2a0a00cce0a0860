"""Framed request/response over TCP.

One connection per (client, endpoint) carries many in-flight requests; a
reader thread routes responses to callers by request id. Servers run each
request on a worker pool so slow requests do not block others on the same
connection.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout

from dlsm.errors import ConnectionFailed, Crashed, Oversize, ProtocolError, RealBackend, Timeout
from dlsm.transport.frame import HEADER_SIZE, MAX_FRAME, Frame

logger = logging.getLogger(__name__)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionFailed("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _discard(sock: socket.socket, n: int) -> None:
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionFailed("connection closed")
        n -= len(chunk)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: FrameServer = self.server.owner  # type: ignore[attr-defined]
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_lock = threading.Lock()

        def send(frame: Frame):
            data = frame.encode()
            with write_lock:
                sock.sendall(data)

        def serve(raw: bytes):
            try:
                req = Frame.decode(raw)
            except Oversize as exc:
                send(Frame(0, 0).error(exc))
                return
            except Exception as exc:  # unknown opcode or malformed frame
                _, request_id, kind, epoch = Frame.decode_header(raw)
                send(Frame(kind, request_id, epoch).error(
                    exc if hasattr(exc, "to_wire") else ProtocolError(str(exc))))
                return
            try:
                resp = server.service.handle(req)
            except Crashed:
                logger.error("%s crashed; closing", server.address)
                server.crash()
                return
            try:
                send(resp)
            except Oversize as exc:
                send(req.error(exc))
            except OSError:
                pass

        try:
            while not server.closed:
                header = _recv_exact(sock, HEADER_SIZE)
                frame_len, request_id, kind, epoch = Frame.decode_header(header)
                if frame_len > MAX_FRAME:
                    _discard(sock, frame_len - HEADER_SIZE)
                    send(Frame(kind, request_id, epoch).error(
                        Oversize(f"frame of {frame_len} bytes exceeds {MAX_FRAME}")))
                    continue
                raw = header + _recv_exact(sock, frame_len - HEADER_SIZE)
                server.pool.submit(serve, raw)
        except (ConnectionFailed, OSError, ProtocolError):
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class FrameServer:
    """Serves a :class:`~dlsm.transport.service.Service` on ``host:port``."""

    def __init__(self, service, address: str = "127.0.0.1:0", workers: int = 16):
        self.service = service
        host, port = parse_addr(address)
        self._server = _TCPServer((host, port), _Handler)
        self._server.owner = self
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="frame-srv")
        self.closed = False
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name=f"serve-{self.address}")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def crash(self) -> None:
        threading.Thread(target=self.close, daemon=True).start()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._server.shutdown()
        self._server.server_close()
        self.pool.shutdown(wait=False, cancel_futures=True)


class _Connection:
    def __init__(self, addr: str, connect_timeout: float):
        self.sock = socket.create_connection(parse_addr(addr), timeout=connect_timeout)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.pending: dict[int, Future] = {}
        self.lock = threading.Lock()
        self.write_lock = threading.Lock()
        self.alive = True
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()

    def _read_loop(self):
        try:
            while True:
                header = _recv_exact(self.sock, HEADER_SIZE)
                frame_len, request_id, _, _ = Frame.decode_header(header)
                raw = header + _recv_exact(self.sock, frame_len - HEADER_SIZE)
                frame = Frame.decode(raw)
                with self.lock:
                    fut = self.pending.pop(request_id, None)
                if fut is not None and not fut.done():
                    fut.set_result(frame)
        except Exception as exc:
            self.fail(ConnectionFailed(f"connection lost: {exc}"))

    def fail(self, exc: Exception) -> None:
        with self.lock:
            self.alive = False
            pending, self.pending = self.pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(exc)
        try:
            self.sock.close()
        except OSError:
            pass

    def send(self, frame: Frame, data: bytes) -> Future:
        fut: Future = Future()
        with self.lock:
            if not self.alive:
                raise ConnectionFailed("connection closed")
            self.pending[frame.request_id] = fut
        try:
            with self.write_lock:
                self.sock.sendall(data)
        except OSError as exc:
            self.fail(ConnectionFailed(str(exc)))
            raise ConnectionFailed(str(exc)) from exc
        return fut

    def forget(self, request_id: int) -> None:
        with self.lock:
            self.pending.pop(request_id, None)


class TcpTransport:
    simulated = False

    def __init__(self, connect_timeout: float = 2.0):
        self.connect_timeout = connect_timeout
        self._conns: dict[str, _Connection] = {}
        self._lock = threading.Lock()

    def _conn(self, endpoint: str) -> _Connection:
        with self._lock:
            conn = self._conns.get(endpoint)
            if conn is not None and conn.alive:
                return conn
            try:
                conn = _Connection(endpoint, self.connect_timeout)
            except OSError as exc:
                raise ConnectionFailed(f"cannot connect to {endpoint}: {exc}") from exc
            self._conns[endpoint] = conn
            return conn

    def call(self, endpoint: str, frame: Frame, timeout: float | None = None) -> Frame:
        data = frame.encode()
        conn = self._conn(endpoint)
        fut = conn.send(frame, data)
        try:
            return fut.result(timeout=timeout)
        except FutureTimeout:
            conn.forget(frame.request_id)
            raise Timeout(f"{endpoint} did not reply within {timeout}s") from None

    def sim_partition(self, a: str, b: str, duration: float) -> None:
        raise RealBackend("partitions can only be injected on the simulator")

    def close(self) -> None:
        with self._lock:
            conns, self._conns = list(self._conns.values()), {}
        for c in conns:
            c.fail(ConnectionFailed("transport closed"))
