"""Serving metrics over per-request and per-iteration records.

Latency means cover finished requests only; unfinished requests surface as
a count. Metrics with no eligible records are absent (None), serialized as
null/empty rather than zero so "no data" never reads as "zero latency".
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

from .errors import ConfigError

if TYPE_CHECKING:  # pragma: no cover
    from .engine import RawRunData


@dataclass(frozen=True)
class RequestRecord:
    """Lifecycle timestamps and sizes of one request."""

    id: int
    arrival_ms: float
    first_token_ms: float | None
    completion_ms: float | None
    input_tokens: int
    output_tokens: int
    preemption_count: int = 0

    @property
    def finished(self) -> bool:
        return self.completion_ms is not None

    @property
    def ttft_ms(self) -> float | None:
        if self.first_token_ms is None:
            return None
        return self.first_token_ms - self.arrival_ms

    @property
    def tpot_ms(self) -> float | None:
        """Mean per-token latency after the first token; None below 2 output tokens."""
        if self.completion_ms is None or self.first_token_ms is None or self.output_tokens < 2:
            return None
        return (self.completion_ms - self.first_token_ms) / (self.output_tokens - 1)

    @property
    def e2el_ms(self) -> float | None:
        if self.completion_ms is None:
            return None
        return self.completion_ms - self.arrival_ms


@dataclass(frozen=True)
class IterationRecord:
    """Token composition of one scheduled micro-batch."""

    batch_seq: int
    schedule_time_ms: float
    prefill_tokens: int
    decode_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.prefill_tokens + self.decode_tokens


def _mean(values: list[float]) -> float | None:
    if not values:
        return None
    return sum(values) / len(values)


def ttft(records: Sequence[RequestRecord]) -> float | None:
    """Mean time to first token over finished requests."""
    return _mean([r.ttft_ms for r in records if r.finished and r.ttft_ms is not None])


def tpot(records: Sequence[RequestRecord]) -> float | None:
    """Mean of per-request token latencies (requests with >= 2 output tokens)."""
    return _mean([r.tpot_ms for r in records if r.tpot_ms is not None])


def e2el(records: Sequence[RequestRecord]) -> float | None:
    """Mean end-to-end latency over finished requests."""
    return _mean([r.e2el_ms for r in records if r.e2el_ms is not None])


def throughput(records: Sequence[RequestRecord], window_ms: float | None = None) -> float | None:
    """Finished input+output tokens per second over the observation window.

    Default window: first arrival (any request) to last completion.
    """
    finished = [r for r in records if r.finished]
    if not finished:
        return None
    if window_ms is None:
        start = min(r.arrival_ms for r in records)
        end = max(r.completion_ms for r in finished if r.completion_ms is not None)
        window_ms = end - start
    if window_ms <= 0:
        return None
    tokens = sum(r.input_tokens + r.output_tokens for r in finished)
    return tokens / (window_ms / 1000.0)


def slo_attainment(
    records: Sequence[RequestRecord], ttft_limit_ms: float, tpot_limit_ms: float
) -> float | None:
    """Fraction of finished requests meeting both latency limits."""
    if ttft_limit_ms <= 0 or tpot_limit_ms <= 0:
        raise ConfigError("SLO limits must be > 0")
    finished = [r for r in records if r.finished]
    if not finished:
        return None
    ok = 0
    for r in finished:
        t = r.ttft_ms
        p = r.tpot_ms
        if t is not None and t <= ttft_limit_ms and (p is None or p <= tpot_limit_ms):
            ok += 1
    return ok / len(finished)


def token_fluctuation(iterations: Sequence[IterationRecord]) -> tuple[float, float] | None:
    """(mean, population stddev) of per-iteration total tokens; None when empty."""
    if not iterations:
        return None
    totals = [it.total_tokens for it in iterations]
    mean = sum(totals) / len(totals)
    var = sum((x - mean) ** 2 for x in totals) / len(totals)
    return mean, math.sqrt(var)


def ideal_balance_reference(iterations: Sequence[IterationRecord]) -> float | None:
    """The constant per-iteration token level that schedules the same work."""
    if not iterations:
        return None
    return sum(it.total_tokens for it in iterations) / len(iterations)


@dataclass(frozen=True)
class Report:
    """Aggregated results of one run plus the underlying tables."""

    ttft_mean_ms: float | None
    tpot_mean_ms: float | None
    e2el_mean_ms: float | None
    throughput_tokens_per_s: float | None
    slo_attainment: float | None
    slo_ttft_ms: float
    slo_tpot_ms: float
    token_mean: float | None
    token_stddev: float | None
    ideal_balance_level: float | None
    bubble_fractions: tuple[float, ...]
    bubble_mean: float | None
    makespan_ms: float
    finished_requests: int
    unfinished_requests: int
    preemptions: int
    committed_tokens: int
    discarded_tokens: int
    truncated: bool
    requests: tuple[RequestRecord, ...]
    iterations: tuple[IterationRecord, ...]


def build_report(raw: RawRunData, slo_ttft_ms: float = 3000.0, slo_tpot_ms: float = 150.0) -> Report:
    """Aggregate raw run data into the full metric suite."""
    records = raw.requests
    fluct = token_fluctuation(raw.iterations)
    fractions = tuple(raw.bubble_fractions())
    return Report(
        ttft_mean_ms=ttft(records),
        tpot_mean_ms=tpot(records),
        e2el_mean_ms=e2el(records),
        throughput_tokens_per_s=throughput(records),
        slo_attainment=slo_attainment(records, slo_ttft_ms, slo_tpot_ms),
        slo_ttft_ms=slo_ttft_ms,
        slo_tpot_ms=slo_tpot_ms,
        token_mean=None if fluct is None else fluct[0],
        token_stddev=None if fluct is None else fluct[1],
        ideal_balance_level=ideal_balance_reference(raw.iterations),
        bubble_fractions=fractions,
        bubble_mean=_mean(list(fractions)),
        makespan_ms=raw.makespan_ms,
        finished_requests=sum(1 for r in records if r.finished),
        unfinished_requests=sum(1 for r in records if not r.finished),
        preemptions=raw.preemptions,
        committed_tokens=raw.committed_tokens,
        discarded_tokens=raw.discarded_tokens,
        truncated=raw.truncated,
        requests=tuple(records),
        iterations=tuple(raw.iterations),
    )


REQUEST_COLUMNS = (
    "id",
    "arrival_ms",
    "first_token_ms",
    "completion_ms",
    "input_tokens",
    "output_tokens",
    "preemption_count",
)

ITERATION_COLUMNS = (
    "batch_seq",
    "schedule_time_ms",
    "prefill_tokens",
    "decode_tokens",
    "total_tokens",
)


def _cell(value: float | int | None) -> str:
    return "" if value is None else str(value)


def write_atomic(path: str, data: str) -> None:
    """Write a file so readers never observe a partial write."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(data)
    os.replace(tmp, path)


def report_to_json(report: Report) -> str:
    """Aggregates only; the tables go to CSV."""
    doc = {
        "ttft_mean_ms": report.ttft_mean_ms,
        "tpot_mean_ms": report.tpot_mean_ms,
        "e2el_mean_ms": report.e2el_mean_ms,
        "throughput_tokens_per_s": report.throughput_tokens_per_s,
        "slo_attainment": report.slo_attainment,
        "slo_ttft_ms": report.slo_ttft_ms,
        "slo_tpot_ms": report.slo_tpot_ms,
        "token_mean": report.token_mean,
        "token_stddev": report.token_stddev,
        "ideal_balance_level": report.ideal_balance_level,
        "bubble_fractions": list(report.bubble_fractions),
        "bubble_mean": report.bubble_mean,
        "makespan_ms": report.makespan_ms,
        "finished_requests": report.finished_requests,
        "unfinished_requests": report.unfinished_requests,
        "preemptions": report.preemptions,
        "committed_tokens": report.committed_tokens,
        "discarded_tokens": report.discarded_tokens,
        "truncated": report.truncated,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def csv_text(header: tuple[str, ...], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_report(report: Report, outdir: str) -> list[str]:
    """Write report.json, requests.csv, iterations.csv; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    path = os.path.join(outdir, "report.json")
    write_atomic(path, report_to_json(report))
    paths.append(path)

    rows = [
        [
            _cell(r.id),
            _cell(r.arrival_ms),
            _cell(r.first_token_ms),
            _cell(r.completion_ms),
            _cell(r.input_tokens),
            _cell(r.output_tokens),
            _cell(r.preemption_count),
        ]
        for r in report.requests
    ]
    path = os.path.join(outdir, "requests.csv")
    write_atomic(path, csv_text(REQUEST_COLUMNS, rows))
    paths.append(path)

    rows = [
        [
            _cell(it.batch_seq),
            _cell(it.schedule_time_ms),
            _cell(it.prefill_tokens),
            _cell(it.decode_tokens),
            _cell(it.total_tokens),
        ]
        for it in report.iterations
    ]
    path = os.path.join(outdir, "iterations.csv")
    write_atomic(path, csv_text(ITERATION_COLUMNS, rows))
    paths.append(path)
    return paths
