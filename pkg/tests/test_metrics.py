"""Latency, throughput, SLO, and batch-fluctuation metrics."""

from __future__ import annotations

import json
import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokensim.engine import run
from tokensim.errors import ConfigError
from tokensim.kvcache import KvConfig
from tokensim.metrics import (
    ITERATION_COLUMNS,
    REQUEST_COLUMNS,
    IterationRecord,
    RequestRecord,
    build_report,
    e2el,
    ideal_balance_reference,
    report_to_json,
    slo_attainment,
    throughput,
    token_fluctuation,
    tpot,
    ttft,
    write_atomic,
    write_report,
)
from tokensim.workload import RequestSpec


def rec(
    rid=0,
    arrival=0.0,
    first=None,
    done=None,
    inp=10,
    out=5,
    preempted=0,
):
    return RequestRecord(
        id=rid,
        arrival_ms=arrival,
        first_token_ms=first,
        completion_ms=done,
        input_tokens=inp,
        output_tokens=out,
        preemption_count=preempted,
    )


def iters(*totals, prefill_share=1.0):
    out = []
    for i, total in enumerate(totals):
        p = int(round(total * prefill_share))
        out.append(
            IterationRecord(
                batch_seq=i, schedule_time_ms=float(i), prefill_tokens=p, decode_tokens=total - p
            )
        )
    return out


class TestTtft:
    def test_single_request(self):
        assert ttft([rec(arrival=10.0, first=52.0, done=60.0)]) == 42.0

    def test_mean_over_finished(self):
        records = [
            rec(rid=0, arrival=0.0, first=42.0, done=50.0),
            rec(rid=1, arrival=10.0, first=30.0, done=40.0),
        ]
        assert ttft(records) == pytest.approx((42.0 + 20.0) / 2.0)

    def test_unfinished_excluded_even_with_first_token(self):
        records = [
            rec(rid=0, arrival=0.0, first=42.0, done=50.0),
            rec(rid=1, arrival=0.0, first=5.0, done=None),
        ]
        assert ttft(records) == 42.0

    def test_absent_without_finished_requests(self):
        assert ttft([]) is None
        assert ttft([rec(first=None, done=None)]) is None


class TestTpot:
    def test_per_token_latency(self):
        # 4 tokens after the first, spread over 40 ms.
        assert tpot([rec(first=10.0, done=50.0, out=5)]) == pytest.approx(10.0)

    def test_single_output_token_is_undefined(self):
        assert rec(first=10.0, done=10.0, out=1).tpot_ms is None
        assert tpot([rec(first=10.0, done=10.0, out=1)]) is None

    def test_mean_of_per_request_values(self):
        records = [
            rec(rid=0, first=0.0, done=16.0, out=3),  # 8 ms/token
            rec(rid=1, first=0.0, done=24.0, out=3),  # 12 ms/token
        ]
        assert tpot(records) == pytest.approx(10.0)

    def test_unfinished_excluded(self):
        assert tpot([rec(first=10.0, done=None, out=5)]) is None


class TestE2el:
    def test_mean(self):
        records = [
            rec(rid=0, arrival=0.0, first=50.0, done=100.0),
            rec(rid=1, arrival=100.0, first=200.0, done=300.0),
        ]
        assert e2el(records) == pytest.approx(150.0)

    def test_absent(self):
        assert e2el([rec(done=None)]) is None


class TestThroughput:
    def test_tokens_over_default_window(self):
        # 100 + 60 tokens in one second.
        assert throughput([rec(arrival=0.0, done=1000.0, inp=100, out=60)]) == pytest.approx(160.0)

    def test_explicit_window_override(self):
        records = [rec(arrival=0.0, done=1000.0, inp=100, out=60)]
        assert throughput(records, window_ms=500.0) == pytest.approx(320.0)

    def test_window_starts_at_earliest_arrival_of_any_request(self):
        records = [
            rec(rid=0, arrival=0.0, done=None),  # unfinished, but opens the window
            rec(rid=1, arrival=900.0, done=1000.0, inp=100, out=60),
        ]
        assert throughput(records) == pytest.approx(160.0)

    def test_absent_without_finished(self):
        assert throughput([rec(done=None)]) is None
        assert throughput([]) is None

    def test_zero_window_is_absent(self):
        assert throughput([rec(arrival=5.0, done=5.0)]) is None


class TestSloAttainment:
    def test_all_pass(self):
        records = [rec(arrival=0.0, first=10.0, done=50.0, out=5)]
        assert slo_attainment(records, 3000.0, 150.0) == 1.0

    def test_all_fail(self):
        records = [rec(arrival=0.0, first=5000.0, done=5050.0, out=5)]
        assert slo_attainment(records, 3000.0, 150.0) == 0.0

    def test_mixed_fraction(self):
        records = [
            rec(rid=0, arrival=0.0, first=10.0, done=50.0, out=5),
            rec(rid=1, arrival=0.0, first=20.0, done=60.0, out=5),
            rec(rid=2, arrival=0.0, first=9000.0, done=9050.0, out=5),  # TTFT miss
            rec(rid=3, arrival=0.0, first=10.0, done=1010.0, out=5),  # TPOT miss
        ]
        assert slo_attainment(records, 3000.0, 150.0) == 0.5
        assert slo_attainment(records, 10000.0, 150.0) == 0.75

    def test_single_token_request_judged_on_ttft_alone(self):
        records = [rec(arrival=0.0, first=100.0, done=100.0, out=1)]
        assert slo_attainment(records, 3000.0, 150.0) == 1.0

    def test_limits_must_be_positive(self):
        with pytest.raises(ConfigError):
            slo_attainment([], 0.0, 150.0)
        with pytest.raises(ConfigError):
            slo_attainment([], 3000.0, -1.0)

    def test_absent_without_finished(self):
        assert slo_attainment([rec(done=None)], 3000.0, 150.0) is None

    @given(
        lim1=st.floats(1.0, 5000.0),
        lim2=st.floats(1.0, 5000.0),
        seed=st.integers(0, 100),
    )
    @settings(max_examples=60, deadline=None)
    def test_loosening_limits_never_hurts(self, lim1, lim2, seed):
        rng = random.Random(seed)
        records = [
            rec(
                rid=i,
                arrival=0.0,
                first=rng.uniform(0, 4000),
                done=rng.uniform(4000, 9000),
                out=rng.randint(1, 30),
            )
            for i in range(10)
        ]
        lo, hi = sorted((lim1, lim2))
        assert slo_attainment(records, lo, 150.0) <= slo_attainment(records, hi, 150.0)
        assert slo_attainment(records, 3000.0, lo) <= slo_attainment(records, 3000.0, hi)


class TestTokenFluctuation:
    def test_constant_batches_have_zero_spread(self):
        mean, stddev = token_fluctuation(iters(5, 5, 5))
        assert (mean, stddev) == (5.0, 0.0)

    def test_alternating_extremes(self):
        mean, stddev = token_fluctuation(iters(0, 2048))
        assert mean == pytest.approx(1024.0)
        assert stddev == pytest.approx(1024.0)

    def test_single_batch(self):
        assert token_fluctuation(iters(7)) == (7.0, 0.0)

    def test_absent_when_no_batches(self):
        assert token_fluctuation([]) is None

    def test_ideal_reference_is_the_mean_level(self):
        batches = iters(4, 0, 8)
        assert ideal_balance_reference(batches) == pytest.approx(4.0)
        assert ideal_balance_reference([]) is None
        # A schedule already at the ideal level has zero fluctuation.
        level = ideal_balance_reference(batches)
        flat = iters(*([int(level)] * 3))
        assert token_fluctuation(flat)[1] == 0.0
        assert ideal_balance_reference(flat) == level


class TestPermutationInvariance:
    @given(st.integers(0, 50))
    @settings(max_examples=40, deadline=None)
    def test_order_does_not_matter(self, seed):
        rng = random.Random(seed)
        records = [
            rec(
                rid=i,
                arrival=rng.uniform(0, 100),
                first=rng.uniform(100, 200),
                done=rng.uniform(200, 400) if rng.random() < 0.8 else None,
                inp=rng.randint(1, 300),
                out=rng.randint(1, 50),
            )
            for i in range(12)
        ]
        shuffled = records[:]
        rng.shuffle(shuffled)
        for fn in (ttft, tpot, e2el, throughput):
            a, b = fn(records), fn(shuffled)
            assert (a is None) == (b is None)
            if a is not None:
                assert a == pytest.approx(b)
        assert slo_attainment(records, 150.0, 40.0) == slo_attainment(shuffled, 150.0, 40.0)


class TestReport:
    def small_run(self):
        reqs = [
            RequestSpec(id=0, arrival_ms=0.0, input_tokens=32, output_tokens=8),
            RequestSpec(id=1, arrival_ms=1.0, input_tokens=48, output_tokens=4),
        ]
        return run(reqs, kv_config=KvConfig(total_pages=64, page_size=16))

    def test_report_mirrors_the_operators(self):
        raw = self.small_run()
        report = build_report(raw)
        assert report.ttft_mean_ms == ttft(raw.requests)
        assert report.tpot_mean_ms == tpot(raw.requests)
        assert report.e2el_mean_ms == e2el(raw.requests)
        assert report.throughput_tokens_per_s == throughput(raw.requests)
        assert report.slo_attainment == slo_attainment(raw.requests, 3000.0, 150.0)
        mean, stddev = token_fluctuation(raw.iterations)
        assert (report.token_mean, report.token_stddev) == (mean, stddev)
        assert report.bubble_fractions == tuple(raw.bubble_fractions())
        assert report.finished_requests == 2
        assert report.unfinished_requests == 0
        assert report.makespan_ms == raw.makespan_ms
        assert not report.truncated

    def test_empty_run_report_is_all_absent(self):
        report = build_report(run([]))
        assert report.ttft_mean_ms is None
        assert report.tpot_mean_ms is None
        assert report.throughput_tokens_per_s is None
        assert report.slo_attainment is None
        assert report.token_mean is None
        assert report.ideal_balance_level is None

    def test_json_round_trip_with_nulls(self):
        text = report_to_json(build_report(run([])))
        assert text.endswith("\n")
        doc = json.loads(text)
        assert doc["ttft_mean_ms"] is None
        assert doc["finished_requests"] == 0
        assert doc["truncated"] is False
        assert list(doc) == sorted(doc)

    def test_write_report_files(self, tmp_path):
        report = build_report(self.small_run())
        outdir = str(tmp_path / "out")
        paths = write_report(report, outdir)
        assert [os.path.basename(p) for p in paths] == [
            "report.json",
            "requests.csv",
            "iterations.csv",
        ]
        with open(paths[1], encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        assert lines[0] == ",".join(REQUEST_COLUMNS)
        assert len(lines) == 1 + 2
        with open(paths[2], encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        assert lines[0] == ",".join(ITERATION_COLUMNS)
        assert len(lines) == 1 + len(report.iterations)
        assert not [f for f in os.listdir(outdir) if f.endswith(".tmp")]

    def test_absent_metrics_serialize_as_empty_cells(self, tmp_path):
        raw = self.small_run()
        half = RequestRecord(
            id=9,
            arrival_ms=0.0,
            first_token_ms=None,
            completion_ms=None,
            input_tokens=5,
            output_tokens=5,
        )
        report = build_report(raw)
        report = type(report)(**{**report.__dict__, "requests": (half,)})
        paths = write_report(report, str(tmp_path))
        with open(paths[1], encoding="utf-8") as fh:
            rows = fh.read().splitlines()
        assert rows[1] == "9,0.0,,,5,5,0"

    def test_atomic_overwrite(self, tmp_path):
        target = str(tmp_path / "file.txt")
        write_atomic(target, "first\n")
        write_atomic(target, "second\n")
        with open(target, encoding="utf-8") as fh:
            assert fh.read() == "second\n"
        assert os.listdir(tmp_path) == ["file.txt"]
