from dlsm.ltc.manifest import RangeDescriptor, RangeManifest
from dlsm.ltc.server import Ltc, LtcConfig, RangeState
from dlsm.placement import select_stoc_power_of_d

__all__ = ["Ltc", "LtcConfig", "RangeDescriptor", "RangeManifest", "RangeState", "select_stoc_power_of_d"]
