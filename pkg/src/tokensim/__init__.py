"""tokensim: deterministic simulator of pipeline-parallel LLM serving schedulers."""

from .engine import (
    CommModel,
    Engine,
    PipelineConfig,
    RawRunData,
    StageCostModel,
    bubble_accounting,
    run,
    stage_time,
    transfer_time,
)
from .errors import ConfigError, SimError, TraceError, UnschedulableError
from .kvcache import KvCacheState, KvConfig, pages_needed, select_preemption_victim
from .metrics import (
    IterationRecord,
    Report,
    RequestRecord,
    build_report,
    e2el,
    ideal_balance_reference,
    slo_attainment,
    throughput,
    token_fluctuation,
    tpot,
    ttft,
    write_report,
)
from .sched import (
    DecodeCandidate,
    KvView,
    MicroBatchPlan,
    PrefillCandidate,
    SchedInputs,
    ThrottleConfig,
    plan_sarathi,
    plan_throttled,
    throttle_decode,
    throttle_prefill_combined,
    throttle_prefill_ut,
    throttle_prefill_wt,
)
from .workload import (
    ArrivalProcess,
    LengthDistribution,
    RequestSpec,
    builtin_length_table,
    generate_arrivals,
    load_trace,
    sample_lengths,
    save_trace,
    synthesize_requests,
)

__version__ = "0.1.0"

__all__ = [
    "ArrivalProcess",
    "CommModel",
    "ConfigError",
    "DecodeCandidate",
    "Engine",
    "IterationRecord",
    "KvCacheState",
    "KvConfig",
    "KvView",
    "LengthDistribution",
    "MicroBatchPlan",
    "PipelineConfig",
    "PrefillCandidate",
    "RawRunData",
    "Report",
    "RequestRecord",
    "RequestSpec",
    "SchedInputs",
    "SimError",
    "StageCostModel",
    "ThrottleConfig",
    "TraceError",
    "UnschedulableError",
    "build_report",
    "builtin_length_table",
    "bubble_accounting",
    "e2el",
    "generate_arrivals",
    "ideal_balance_reference",
    "load_trace",
    "pages_needed",
    "plan_sarathi",
    "plan_throttled",
    "run",
    "sample_lengths",
    "save_trace",
    "select_preemption_victim",
    "slo_attainment",
    "stage_time",
    "synthesize_requests",
    "throttle_decode",
    "throttle_prefill_combined",
    "throttle_prefill_ut",
    "throttle_prefill_wt",
    "throughput",
    "token_fluctuation",
    "tpot",
    "transfer_time",
    "ttft",
    "write_report",
]
