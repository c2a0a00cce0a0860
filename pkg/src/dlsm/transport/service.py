"""Request dispatch on the serving side and typed calls on the client side."""

from __future__ import annotations

import itertools
import logging
import threading

from dlsm.errors import Crashed, DlsmError, ProtocolError, UnknownOpcode, error_from_wire
from dlsm.transport.frame import Frame, Op, pack, unpack

logger = logging.getLogger(__name__)


class Service:
    """Maps opcodes to handler methods ``fn(args, frame) -> result``.

    Handlers raise :class:`DlsmError` subclasses for expected failures; those
    become error frames. :class:`Crashed` propagates so the transport can
    treat the component as dead.
    """

    name = "service"

    def __init__(self):
        self._handlers = {int(Op.ECHO): lambda args, frame: args}

    def route(self, op: Op, fn) -> None:
        self._handlers[int(op)] = fn

    def handle(self, frame: Frame) -> Frame:
        fn = self._handlers.get(frame.kind)
        if fn is None:
            return frame.error(UnknownOpcode(f"{self.name} does not serve opcode {frame.kind:#06x}"))
        try:
            result = fn(unpack(frame.payload), frame)
            return frame.reply(pack(result))
        except Crashed:
            raise
        except DlsmError as exc:
            return frame.error(exc)
        except Exception as exc:
            logger.exception("%s: handler for %#06x failed", self.name, frame.kind)
            return frame.error(DlsmError(f"internal error: {exc!r}"))


class Rpc:
    """Encodes arguments, calls through a transport, decodes or raises."""

    def __init__(self, transport, default_timeout: float | None = 10.0):
        self.transport = transport
        self.default_timeout = default_timeout
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def _next_id(self) -> int:
        with self._lock:
            return next(self._ids)

    def call(self, endpoint: str, op: Op, args=None, epoch: int = 0, timeout: float | None = None):
        req = Frame(int(op), self._next_id(), epoch, pack(args) if args is not None else b"")
        resp = self.transport.call(endpoint, req, timeout if timeout is not None else self.default_timeout)
        if resp.request_id != req.request_id:
            raise ProtocolError(f"response id {resp.request_id} for request {req.request_id}")
        body = unpack(resp.payload)
        if resp.is_error:
            raise error_from_wire(body)
        return body
