"""Online serving simulator: workloads, continuous batching, metrics, oracles."""
from .bench import OverheadRecord, bench_overhead
from .metrics import MetricsReport, RequestRecord
from .scheduler import ControlEvent, Scheduler, StepInfo, serve
from .verify import VerifyReport, verify_batching_transparency, verify_equivalence
from .workload import Request, WorkloadSpec, generate_trace, power_law_shares, read_trace, write_trace

__all__ = [
    "ControlEvent",
    "MetricsReport",
    "OverheadRecord",
    "Request",
    "RequestRecord",
    "Scheduler",
    "StepInfo",
    "VerifyReport",
    "WorkloadSpec",
    "bench_overhead",
    "generate_trace",
    "power_law_shares",
    "read_trace",
    "serve",
    "verify_batching_transparency",
    "verify_equivalence",
    "write_trace",
]
