"""Discrete-event simulation of a pipeline-parallel serving engine.

Micro-batches flow through ``depth`` uniform stages. A new batch is planned
whenever the first stage is free, fewer than ``depth`` batches are in
flight, and schedulable work exists. Batches enter every stage in sequence
order; a stage starts batch i at max(its own free time, batch i's transfer
arrival from the previous stage). Results commit when the last stage
finishes a batch.

Event processing drains every event at one timestamp (in push order), then
attempts scheduling once. That ordering is part of the engine's contract:
the brute-force tick simulator used in tests reproduces it tick by tick.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

from .errors import ConfigError, UnschedulableError
from .kvcache import KvCacheState, KvConfig, pages_needed, select_preemption_victim
from .metrics import IterationRecord, RequestRecord
from .sched import (
    DecodeCandidate,
    KvView,
    MicroBatchPlan,
    PrefillCandidate,
    SchedInputs,
    ThrottleConfig,
    plan_sarathi,
    plan_throttled,
)
from .workload import RequestSpec

SCHEDULERS = ("throttle", "sarathi")

# Event kinds, in the order they are logged.
ARRIVAL = "arrival"
SCHEDULE_POINT = "schedule_point"
STAGE_COMPLETE = "stage_complete"
TRANSFER_COMPLETE = "transfer_complete"


@dataclass(frozen=True)
class StageCostModel:
    """Linear per-stage latency: fixed overhead, per-token cost, context cost."""

    c0: float = 1.0
    c_tok: float = 0.01
    c_ctx: float = 0.1

    def __post_init__(self) -> None:
        if self.c0 < 0 or self.c_tok < 0 or self.c_ctx < 0:
            raise ConfigError("stage cost coefficients must be >= 0")
        if self.c0 + self.c_tok <= 0:
            raise ConfigError("need c0 + c_tok > 0 so nonempty batches take time")


@dataclass(frozen=True)
class CommModel:
    """Inter-stage activation transfer: fixed latency plus bytes over bandwidth."""

    latency_ms: float = 0.1
    bytes_per_token: float = 16384.0
    bandwidth_bytes_per_ms: float = 20.79e6

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_ms <= 0:
            raise ConfigError(f"bandwidth must be > 0, got {self.bandwidth_bytes_per_ms}")
        if self.latency_ms < 0 or self.bytes_per_token < 0:
            raise ConfigError("comm latency and payload must be >= 0")

    @classmethod
    def pcie(cls, latency_ms: float = 0.1, bytes_per_token: float = 16384.0) -> CommModel:
        # 20.79 GB/s (decimal) = 20.79e6 bytes/ms.
        return cls(latency_ms, bytes_per_token, 20.79e6)

    @classmethod
    def network(cls, latency_ms: float = 0.1, bytes_per_token: float = 16384.0) -> CommModel:
        # 73.28 Gbit/s = 73.28e9 / 8 bytes/s = 9.16e6 bytes/ms.
        return cls(latency_ms, bytes_per_token, 73.28e9 / 8.0 / 1000.0)


@dataclass(frozen=True)
class PipelineConfig:
    depth: int = 4
    cost: StageCostModel = StageCostModel()
    comm: CommModel = CommModel()

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"pipeline.depth must be >= 1, got {self.depth}")


def stage_time(plan: MicroBatchPlan, cost: StageCostModel) -> float:
    """Per-stage latency of one micro-batch in ms; 0 for an empty plan."""
    if plan.is_empty():
        return 0.0
    return cost.c0 + cost.c_tok * plan.total_tokens + cost.c_ctx * plan.decode_context_tokens / 1024.0


def transfer_time(plan: MicroBatchPlan, comm: CommModel) -> float:
    """Activation hand-off latency between consecutive stages in ms."""
    return comm.latency_ms + plan.total_tokens * comm.bytes_per_token / comm.bandwidth_bytes_per_ms


def bubble_accounting(
    busy_intervals: list[list[tuple[float, float]]], makespan_ms: float
) -> list[float]:
    """Per-stage idle fraction of [0, makespan]. Intervals must be disjoint and ordered."""
    fractions: list[float] = []
    for intervals in busy_intervals:
        busy = 0.0
        prev_end = None
        for start, end in intervals:
            if end < start or (prev_end is not None and start < prev_end):
                raise ValueError("stage busy intervals overlap or are out of order")
            busy += end - start
            prev_end = end
        if makespan_ms <= 0:
            fractions.append(0.0)
            continue
        fractions.append((makespan_ms - busy) / makespan_ms)
    return fractions


@dataclass
class _Request:
    spec: RequestSpec
    prefill_target: int
    prefill_done: int = 0
    inflight_chunk: int = 0
    generated: int = 0
    preemptions: int = 0
    committed_incarnation: int = 0
    arrived: bool = False
    decode_phase: bool = False
    in_flight: bool = False
    first_token_ms: float | None = None
    completion_ms: float | None = None

    @property
    def finished(self) -> bool:
        return self.completion_ms is not None


@dataclass
class _Batch:
    seq: int
    plan: MicroBatchPlan
    stage_ms: float
    transfer_ms: float


@dataclass
class RawRunData:
    """Everything a run produced, before metric aggregation."""

    requests: list[RequestRecord]
    iterations: list[IterationRecord]
    busy_intervals: list[list[tuple[float, float]]]
    stage_spans: list[tuple[int, int, float, float]]
    makespan_ms: float
    committed_tokens: int
    discarded_tokens: int
    preemptions: int
    truncated: bool
    events: list[dict] | None = None

    def bubble_fractions(self) -> list[float]:
        return bubble_accounting(self.busy_intervals, self.makespan_ms)


class Engine:
    """One simulation instance. Use run() below unless tests need stepping."""

    def __init__(
        self,
        requests: list[RequestSpec],
        scheduler: str = "throttle",
        pipeline: PipelineConfig | None = None,
        kv_config: KvConfig | None = None,
        throttle: ThrottleConfig | None = None,
        token_budget: int = 2048,
        horizon_ms: float | None = None,
        record_events: bool = False,
    ):
        if scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
        self._scheduler = scheduler
        self._pipeline = pipeline if pipeline is not None else PipelineConfig()
        kv_config = kv_config if kv_config is not None else KvConfig(total_pages=4096, page_size=16)
        self._throttle = throttle if throttle is not None else ThrottleConfig()
        if token_budget < 1:
            raise ConfigError(f"token_budget must be >= 1, got {token_budget}")
        self._token_budget = token_budget
        self._horizon = horizon_ms
        if horizon_ms is not None and horizon_ms < 0:
            raise ConfigError(f"horizon_ms must be >= 0, got {horizon_ms}")

        seen: set[int] = set()
        for i, spec in enumerate(requests):
            if spec.id in seen:
                raise ConfigError(f"duplicate request id {spec.id}")
            seen.add(spec.id)
            if i and spec.arrival_ms < requests[i - 1].arrival_ms:
                raise ConfigError("workload must be sorted by arrival time")
            lifetime = spec.input_tokens + spec.output_tokens - 1
            need = pages_needed(0, lifetime, kv_config.page_size)
            if need > kv_config.total_pages:
                raise UnschedulableError(
                    f"request {spec.id} needs {need} KV pages over its lifetime "
                    f"but the cache has only {kv_config.total_pages}",
                    (spec.id,),
                )

        self._requests: dict[int, _Request] = {
            spec.id: _Request(spec=spec, prefill_target=spec.input_tokens) for spec in requests
        }
        self.kv = KvCacheState(kv_config)
        self.clock = 0.0
        self.makespan_ms = 0.0
        self.committed_tokens = 0
        self.discarded_tokens = 0
        self.preemptions = 0
        self.truncated = False

        depth = self._pipeline.depth
        self.in_flight: dict[int, _Batch] = {}
        self._waiting: list[int] = []
        self._decode_ready: list[int] = []
        self._free_at = [0.0] * depth
        self._next_seq = [0] * depth
        self._pending: list[dict[int, float]] = [dict() for _ in range(depth)]
        self._busy: list[list[tuple[float, float]]] = [[] for _ in range(depth)]
        self._stage_spans: list[tuple[int, int, float, float]] = []
        self._iterations: list[IterationRecord] = []
        self._events: list[dict] | None = [] if record_events else None
        self._batch_seq = 0
        self._eseq = itertools.count()
        self._heap: list[tuple[float, int, str, int, int]] = []
        for spec in requests:
            self._push(spec.arrival_ms, ARRIVAL, spec.id, 0)

    # -- event plumbing -----------------------------------------------------

    def _push(self, time_ms: float, kind: str, a: int, b: int) -> None:
        heapq.heappush(self._heap, (time_ms, next(self._eseq), kind, a, b))

    def _log(self, time_ms: float, kind: str, stage: int | None, batch: int | None, plan: MicroBatchPlan | None) -> None:
        if self._events is None:
            return
        self._events.append(
            {
                "time_ms": time_ms,
                "kind": kind,
                "stage": stage,
                "batch": batch,
                "prefill_tokens": 0 if plan is None else plan.prefill_tokens,
                "decode_tokens": 0 if plan is None else plan.decode_tokens,
            }
        )

    def step(self) -> bool:
        """Drain all events at the next timestamp, then try to schedule once.

        Returns False when the simulation is over (or the horizon passed).
        Raises UnschedulableError if no forward progress is possible.
        """
        if not self._heap:
            stuck = tuple(sorted(rid for rid, r in self._requests.items() if not r.finished))
            if stuck:
                raise UnschedulableError(
                    f"no forward progress possible; stuck requests: {list(stuck)}", stuck
                )
            return False
        t = self._heap[0][0]
        if self._horizon is not None and t > self._horizon:
            self.truncated = True
            self.makespan_ms = self._horizon
            return False
        self.clock = t
        self.makespan_ms = max(self.makespan_ms, t)
        while self._heap and self._heap[0][0] == t:
            _, _, kind, a, b = heapq.heappop(self._heap)
            self._dispatch(t, kind, a, b)
        self._maybe_schedule(t)
        return True

    def run(self) -> RawRunData:
        while self.step():
            pass
        return self.raw_data()

    def _dispatch(self, t: float, kind: str, a: int, b: int) -> None:
        if kind == ARRIVAL:
            self._requests[a].arrived = True
            self._waiting.append(a)
            self._log(t, ARRIVAL, None, None, None)
        elif kind == STAGE_COMPLETE:
            stage, seq = a, b
            batch = self.in_flight[seq]
            self._log(t, STAGE_COMPLETE, stage, seq, batch.plan)
            if stage == self._pipeline.depth - 1:
                self._commit(t, batch)
            else:
                self._push(t + batch.transfer_ms, TRANSFER_COMPLETE, stage + 1, seq)
        elif kind == TRANSFER_COMPLETE:
            stage, seq = a, b
            self._log(t, TRANSFER_COMPLETE, stage, seq, self.in_flight[seq].plan)
            self._pending[stage][seq] = t
            self._pump(stage)
        else:  # pragma: no cover - no other kinds are pushed
            raise AssertionError(f"unknown event kind {kind!r}")

    def _pump(self, stage: int) -> None:
        # Batches enter a stage strictly in sequence order; a batch whose
        # transfer arrived early waits for its predecessor.
        while self._next_seq[stage] in self._pending[stage]:
            seq = self._next_seq[stage]
            arrived = self._pending[stage].pop(seq)
            batch = self.in_flight[seq]
            start = max(arrived, self._free_at[stage])
            end = start + batch.stage_ms
            self._busy[stage].append((start, end))
            self._stage_spans.append((seq, stage, start, end))
            self._free_at[stage] = end
            self._next_seq[stage] += 1
            self._push(end, STAGE_COMPLETE, stage, seq)

    # -- commit and preemption ----------------------------------------------

    def _commit(self, t: float, batch: _Batch) -> None:
        plan = batch.plan
        del self.in_flight[batch.seq]
        self.committed_tokens += plan.total_tokens
        for rid in plan.decode_ids:
            r = self._requests[rid]
            r.in_flight = False
            r.generated += 1
            r.committed_incarnation += 1
            if r.generated >= r.spec.output_tokens:
                self._finish(r, t)
            else:
                self._decode_ready.append(rid)
        for rid, tokens in plan.prefill_chunks:
            r = self._requests[rid]
            r.in_flight = False
            r.inflight_chunk = 0
            r.prefill_done += tokens
            r.committed_incarnation += tokens
            if r.prefill_done >= r.prefill_target:
                r.decode_phase = True
                if r.generated == 0:
                    # Final prompt chunk produces the first output token.
                    r.generated = 1
                    r.first_token_ms = t
                    if r.generated >= r.spec.output_tokens:
                        self._finish(r, t)
                        continue
                self._decode_ready.append(rid)
            else:
                self._waiting.append(rid)

    def _finish(self, r: _Request, t: float) -> None:
        r.completion_ms = t
        r.decode_phase = False
        self.kv.release(r.spec.id)

    def _preempt(self, rid: int) -> None:
        r = self._requests[rid]
        self.kv.release(rid)
        self.preemptions += 1
        r.preemptions += 1
        self.discarded_tokens += r.committed_incarnation
        r.committed_incarnation = 0
        # Rebuild exactly the cache that existed: prompt plus all generated
        # tokens except the newest. Generated text is kept.
        r.prefill_target = r.spec.input_tokens + max(r.generated - 1, 0)
        r.prefill_done = 0
        r.decode_phase = False
        self._decode_ready.remove(rid)
        self._waiting.append(rid)

    # -- scheduling ----------------------------------------------------------

    def _fcfs_key(self, rid: int) -> tuple[float, int]:
        return (self._requests[rid].spec.arrival_ms, rid)

    def _maybe_schedule(self, t: float) -> None:
        while True:
            if len(self.in_flight) >= self._pipeline.depth:
                return
            if self._free_at[0] > t:
                return
            if not self._waiting and not self._decode_ready:
                return
            self._waiting.sort(key=self._fcfs_key)
            self._decode_ready.sort(key=self._fcfs_key)
            plan = self._plan()
            mutated = self._apply_kv(plan)
            if plan.is_empty():
                if not mutated:
                    return
                continue  # preemption changed the picture; plan again
            self._launch(t, plan)
            return

    def _plan(self) -> MicroBatchPlan:
        wp = 0
        rd = 0
        for r in self._requests.values():
            if not r.arrived or r.finished:
                continue
            if r.decode_phase:
                rd += 1
            else:
                wp += r.prefill_target - r.prefill_done - r.inflight_chunk
        inputs = SchedInputs(
            waiting_prefill_tokens=wp,
            running_decode_tokens=rd,
            kv_free=self.kv.idle_rate(),
            pipeline_depth=self._pipeline.depth,
        )
        prefill_queue = [
            PrefillCandidate(
                id=rid,
                remaining_tokens=self._requests[rid].prefill_target - self._requests[rid].prefill_done,
                stored_tokens=self.kv.stored_tokens(rid),
            )
            for rid in self._waiting
        ]
        decode_queue = [
            DecodeCandidate(id=rid, stored_tokens=self.kv.stored_tokens(rid))
            for rid in self._decode_ready
        ]
        view = KvView(
            free_pages=self.kv.free_pages,
            total_pages=self.kv.config.total_pages,
            page_size=self.kv.config.page_size,
        )
        if self._scheduler == "throttle":
            return plan_throttled(inputs, prefill_queue, decode_queue, view, self._throttle)
        return plan_sarathi(inputs, prefill_queue, decode_queue, view, self._token_budget)

    def _apply_kv(self, plan: MicroBatchPlan) -> bool:
        """Allocate the plan's pages, preempting decodes on failure.

        Returns True if any preemption happened. Dropped ids are removed
        from the plan in place.
        """
        mutated = False
        kept: list[int] = []
        dropped: set[int] = set()
        for rid in plan.decode_ids:
            if rid in dropped:
                continue
            while not self.kv.allocate(rid, 1):
                victim = select_preemption_victim(
                    (vid, self._requests[vid].spec.arrival_ms) for vid in self._decode_ready
                )
                assert victim is not None, "decode allocator is itself a candidate"
                self._preempt(victim)
                mutated = True
                if victim == rid:
                    dropped.add(rid)
                    break
                dropped.add(victim)
                if victim in kept:
                    kept.remove(victim)
            else:
                kept.append(rid)
        if len(kept) != len(plan.decode_ids):
            plan.decode_ids = kept
        plan.decode_context_tokens = sum(self.kv.stored_tokens(rid) for rid in kept)
        for rid, tokens in plan.prefill_chunks:
            if not self.kv.allocate(rid, tokens):
                raise AssertionError("prefill pages were reserved at planning time")
        return mutated

    def _launch(self, t: float, plan: MicroBatchPlan) -> None:
        seq = self._batch_seq
        self._batch_seq += 1
        batch = _Batch(
            seq=seq,
            plan=plan,
            stage_ms=stage_time(plan, self._pipeline.cost),
            transfer_ms=transfer_time(plan, self._pipeline.comm),
        )
        self.in_flight[seq] = batch
        launched = set(plan.decode_ids)
        for rid in plan.decode_ids:
            self._requests[rid].in_flight = True
        for rid, tokens in plan.prefill_chunks:
            launched.add(rid)
            r = self._requests[rid]
            r.in_flight = True
            r.inflight_chunk = tokens
        self._waiting = [rid for rid in self._waiting if rid not in launched]
        self._decode_ready = [rid for rid in self._decode_ready if rid not in launched]
        self._iterations.append(
            IterationRecord(
                batch_seq=seq,
                schedule_time_ms=t,
                prefill_tokens=plan.prefill_tokens,
                decode_tokens=plan.decode_tokens,
            )
        )
        self._log(t, SCHEDULE_POINT, 0, seq, plan)
        end = t + batch.stage_ms
        self._busy[0].append((t, end))
        self._stage_spans.append((seq, 0, t, end))
        self._free_at[0] = end
        self._next_seq[0] += 1
        self._push(end, STAGE_COMPLETE, 0, seq)

    # -- results --------------------------------------------------------------

    def _clip_spans(self) -> None:
        limit = self.makespan_ms
        self._busy = [
            [(s, min(e, limit)) for s, e in intervals if s < limit] for intervals in self._busy
        ]
        self._stage_spans = [
            (seq, stage, s, min(e, limit)) for seq, stage, s, e in self._stage_spans if s < limit
        ]

    def raw_data(self) -> RawRunData:
        """Snapshot of results so far; valid mid-run and after a stall."""
        if self.truncated:
            self._clip_spans()
        records = [
            RequestRecord(
                id=r.spec.id,
                arrival_ms=r.spec.arrival_ms,
                first_token_ms=r.first_token_ms,
                completion_ms=r.completion_ms,
                input_tokens=r.spec.input_tokens,
                output_tokens=r.spec.output_tokens,
                preemption_count=r.preemptions,
            )
            for r in self._requests.values()
        ]
        records.sort(key=lambda rec: rec.id)
        return RawRunData(
            requests=records,
            iterations=list(self._iterations),
            busy_intervals=[list(iv) for iv in self._busy],
            stage_spans=list(self._stage_spans),
            makespan_ms=self.makespan_ms,
            committed_tokens=self.committed_tokens,
            discarded_tokens=self.discarded_tokens,
            preemptions=self.preemptions,
            truncated=self.truncated,
            events=None if self._events is None else list(self._events),
        )


def run(
    requests: list[RequestSpec],
    scheduler: str = "throttle",
    pipeline: PipelineConfig | None = None,
    kv_config: KvConfig | None = None,
    throttle: ThrottleConfig | None = None,
    token_budget: int = 2048,
    horizon_ms: float | None = None,
    record_events: bool = False,
) -> RawRunData:
    """Simulate a workload to completion (or horizon) and return raw results."""
    engine = Engine(
        requests,
        scheduler=scheduler,
        pipeline=pipeline,
        kv_config=kv_config,
        throttle=throttle,
        token_budget=token_budget,
        horizon_ms=horizon_ms,
        record_events=record_events,
    )
    return engine.run()
