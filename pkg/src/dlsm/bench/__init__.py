"""Workload generation, metrics and scripted cluster experiments."""

from dlsm.bench.metrics import Recorder, RunMetrics, SecondStats, percentiles
from dlsm.bench.report import emit_report
from dlsm.bench.runner import (
    ElasticityResult,
    Oracle,
    OffloadResult,
    PlacementResult,
    elasticity_scenario,
    offload_run,
    placement_experiment,
    run_workload,
)
from dlsm.bench.workload import OpGenerator, WorkloadSpec, ZipfianGenerator, item_key, scrambled_zipf_pmf

__all__ = [
    "ElasticityResult", "OffloadResult", "OpGenerator", "Oracle", "Recorder", "RunMetrics",
    "PlacementResult", "SecondStats", "WorkloadSpec", "ZipfianGenerator", "elasticity_scenario", "emit_report",
    "item_key", "offload_run", "percentiles", "placement_experiment", "run_workload", "scrambled_zipf_pmf",
]
