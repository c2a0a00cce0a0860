"""Exception hierarchy shared by every component.

Each error carries a stable numeric ``code`` so it can cross the wire in an
error frame and be re-raised as the same class on the calling side.
"""

from __future__ import annotations

_REGISTRY: dict[int, type["DlsmError"]] = {}


class DlsmError(Exception):
    code = 1

    def __init__(self, message: str = "", **data):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.data = data

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.code in _REGISTRY and _REGISTRY[cls.code] is not cls:
            raise TypeError(f"duplicate error code {cls.code} for {cls.__name__}")
        _REGISTRY[cls.code] = cls

    def to_wire(self) -> dict:
        return {"code": self.code, "msg": self.message, "data": self.data}


def error_from_wire(obj: dict) -> DlsmError:
    cls = _REGISTRY.get(obj.get("code"), DlsmError)
    return cls(obj.get("msg", ""), **(obj.get("data") or {}))


_REGISTRY[DlsmError.code] = DlsmError


# lsm-core
class InvalidKey(DlsmError):
    code = 10


class ImmutableMemtable(DlsmError):
    code = 11


class SeqRegression(DlsmError):
    code = 12


class EmptyMemtable(DlsmError):
    code = 13


class MemtableFull(DlsmError):
    code = 14


class ChecksumMismatch(DlsmError):
    code = 15


class CorruptData(DlsmError):
    """Malformed encoding, or a duplicate (key, seq) pair across inputs."""

    code = 16


# stoc
class AlreadyExists(DlsmError):
    code = 20


class NotFound(DlsmError):
    code = 21


class OutOfRange(DlsmError):
    code = 22


class OutOfSpace(DlsmError):
    code = 23


# ltc
class NotOwner(DlsmError):
    """Range is not owned here; ``data['hint']`` names the last known owner."""

    code = 30

    @property
    def hint(self):
        return self.data.get("hint")


class Unavailable(DlsmError):
    code = 31


class StaleEpoch(DlsmError):
    code = 32


class UnknownJob(DlsmError):
    code = 33


class RecoveryFailed(DlsmError):
    code = 34


class NoCandidates(DlsmError):
    code = 35


class StorageRead(DlsmError):
    code = 36


class StorageWrite(DlsmError):
    code = 37


# compaction worker
class FetchFailed(DlsmError):
    code = 40


class WriteFailed(DlsmError):
    code = 41


class Busy(DlsmError):
    """Worker queue is full; retry later."""

    code = 42


# coordinator / cluster
class InvalidConfig(DlsmError):
    code = 50


class AlreadyMember(DlsmError):
    code = 51


class LastLtc(DlsmError):
    code = 52


class UnknownLtc(DlsmError):
    code = 53


class ClusterUnavailable(DlsmError):
    code = 54


# bench
class IoError(DlsmError):
    code = 70


# transport
class TransportError(DlsmError):
    code = 60


class Timeout(TransportError):
    code = 61


class ConnectionFailed(TransportError):
    code = 62


class Oversize(TransportError):
    code = 63


class UnknownOpcode(TransportError):
    code = 64


class RealBackend(TransportError):
    code = 65


class ProtocolError(TransportError):
    code = 66


class Crashed(DlsmError):
    """Raised by an armed fault-injection point; the component is dead."""

    code = 90
