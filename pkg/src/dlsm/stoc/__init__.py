from dlsm.stoc.backing import DiskBacking, MemoryBacking
from dlsm.stoc.client import StocClient
from dlsm.stoc.server import STATS_KEY, StoC, StoCConfig, StoCStats

__all__ = ["DiskBacking", "MemoryBacking", "STATS_KEY", "StoC", "StoCConfig", "StoCStats", "StocClient"]
