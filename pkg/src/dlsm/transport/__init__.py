"""Framed request/response protocol over TCP or the in-process simulator."""

from dlsm.transport.frame import HEADER_SIZE, KIND_ERROR, MAGIC, MAX_FRAME, Frame, Op, pack, unpack
from dlsm.transport.runtime import RealRuntime, SimRuntime
from dlsm.transport.service import Rpc, Service
from dlsm.transport.sim import SimNetwork, SimTransport, sim_partition
from dlsm.transport.tcp import FrameServer, TcpTransport

__all__ = [
    "HEADER_SIZE",
    "KIND_ERROR",
    "MAGIC",
    "MAX_FRAME",
    "Frame",
    "FrameServer",
    "Op",
    "RealRuntime",
    "Rpc",
    "Service",
    "SimNetwork",
    "SimRuntime",
    "SimTransport",
    "TcpTransport",
    "pack",
    "sim_partition",
    "unpack",
]
