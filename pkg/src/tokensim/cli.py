"""Command-line entry point: run, sweep, ablate, gen-trace.

Every config key is also a flag (--section.key value) and flags win over
the config file. Outputs are deterministic: rerunning a command with the
same inputs rewrites byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

from .config import (
    ABLATION_LABELS,
    CONFIG_KEYS,
    RunConfig,
    config_sha256,
    parse_config,
    resolve_scheduler,
)
from .engine import RawRunData, run as run_engine
from .errors import ConfigError, SimError, UnschedulableError
from .metrics import Report, build_report, csv_text, write_atomic, write_report
from .workload import (
    ArrivalProcess,
    LengthDistribution,
    RequestSpec,
    builtin_length_table,
    generate_arrivals,
    load_trace,
    save_trace,
    synthesize_requests,
)

SWEEP_COLUMNS = (
    "rate",
    "scheduler",
    "ttft_ms",
    "tpot_ms",
    "e2el_ms",
    "throughput_tokens_per_s",
    "slo_attainment",
    "token_stddev",
    "bubble_mean",
    "bubble_fractions",
    "status",
)

ABLATION_COLUMNS = (
    "scheduler",
    "label",
    "workload_sha256",
    "ttft_ms",
    "tpot_ms",
    "e2el_ms",
    "throughput_tokens_per_s",
    "slo_attainment",
    "token_stddev",
    "bubble_mean",
    "preemptions",
    "status",
)

ABLATION_ORDER = ("throttle", "throttle-wt-only", "throttle-ut-only", "sarathi")


def build_workload(cfg: RunConfig, rate_per_s: float | None = None) -> list[RequestSpec]:
    """Materialize the configured workload, optionally at an overridden rate."""
    if cfg.source == "trace":
        specs = load_trace(cfg.trace_path)
        if cfg.resample_rate_per_s is not None:
            process = ArrivalProcess.poisson(cfg.resample_rate_per_s, cfg.seed)
            times = generate_arrivals(process, len(specs))
            specs = [replace(spec, arrival_ms=t) for spec, t in zip(specs, times)]
        return specs
    rate = cfg.rate_per_s if rate_per_s is None else rate_per_s
    process = ArrivalProcess.poisson(rate, cfg.seed)
    clamps = dict(min_tokens=cfg.min_tokens, max_tokens=cfg.max_tokens)
    if cfg.lengths == "fixed":
        dist = LengthDistribution.fixed(cfg.fixed_input, cfg.fixed_output, **clamps)
    elif cfg.lengths == "lognormal":
        dist = LengthDistribution.lognormal(
            cfg.mean_input, cfg.sigma_input, cfg.mean_output, cfg.sigma_output, **clamps
        )
    else:
        dist = LengthDistribution.empirical(builtin_length_table(cfg.lengths).table, **clamps)
    return synthesize_requests(process, dist, cfg.num_requests)


def workload_sha256(specs: list[RequestSpec]) -> str:
    doc = [[s.arrival_ms, s.input_tokens, s.output_tokens] for s in specs]
    return hashlib.sha256(json.dumps(doc, separators=(",", ":")).encode("utf-8")).hexdigest()


def run_label(scheduler: str, cfg: RunConfig, rate: float | None) -> str:
    if cfg.source == "trace":
        return f"{scheduler}-trace"
    effective = cfg.rate_per_s if rate is None else rate
    return f"{scheduler}-r{effective:g}"


def execute_one(
    cfg: RunConfig, scheduler_name: str, workload: list[RequestSpec]
) -> tuple[Report | None, RawRunData | None, str | None]:
    policy, mode = resolve_scheduler(scheduler_name, cfg.throttle.mode)
    throttle = replace(cfg.throttle, mode=mode)
    try:
        raw = run_engine(
            workload,
            scheduler=policy,
            pipeline=cfg.pipeline,
            kv_config=cfg.kv,
            throttle=throttle,
            token_budget=cfg.token_budget,
            horizon_ms=cfg.horizon_ms,
            record_events=cfg.events_log,
        )
    except UnschedulableError as exc:
        return None, None, str(exc)
    return build_report(raw, cfg.slo_ttft_ms, cfg.slo_tpot_ms), raw, None


def write_run_dir(cfg: RunConfig, label: str, report: Report, raw: RawRunData) -> str:
    rundir = os.path.join(cfg.outdir, label)
    write_report(report, rundir)
    if raw.events is not None:
        lines = [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in raw.events]
        write_atomic(os.path.join(rundir, "events.jsonl"), "".join(line + "\n" for line in lines))
    return rundir


def write_manifest(cfg: RunConfig, runs: dict[str, dict[str, object]]) -> None:
    os.makedirs(cfg.outdir, exist_ok=True)
    doc = {"runs": runs}
    write_atomic(
        os.path.join(cfg.outdir, "manifest.json"),
        json.dumps(doc, indent=2, sort_keys=True) + "\n",
    )


def _manifest_entry(cfg: RunConfig, scheduler: str, rate: float | None) -> dict[str, object]:
    extra = {"effective.scheduler": scheduler}
    if rate is not None:
        extra["effective.rate_per_s"] = rate
    return {
        "config_sha256": config_sha256(cfg.resolved, extra),
        "scheduler": scheduler,
        "rate_per_s": rate if cfg.source != "trace" else None,
    }


def _cell(value: object) -> str:
    return "" if value is None else str(value)


def cmd_run(cfg: RunConfig, args: argparse.Namespace) -> int:
    workload = build_workload(cfg)
    report, raw, error = execute_one(cfg, cfg.scheduler, workload)
    if error is not None:
        print(f"error: {error}", file=sys.stderr)
        return 1
    rate = None if cfg.source == "trace" else cfg.rate_per_s
    label = run_label(cfg.scheduler, cfg, rate)
    rundir = write_run_dir(cfg, label, report, raw)
    write_manifest(cfg, {label: _manifest_entry(cfg, cfg.scheduler, rate)})
    print(
        f"{label}: {report.finished_requests}/{len(workload)} requests finished, "
        f"report in {rundir}"
    )
    return 0


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.source == "trace":
        raise ConfigError("sweep varies the arrival rate; it requires workload.source=poisson")
    rows: list[list[str]] = []
    runs: dict[str, dict[str, object]] = {}
    for rate in cfg.sweep_rates:
        workload = build_workload(cfg, rate)
        for scheduler in cfg.sweep_schedulers:
            label = run_label(scheduler, cfg, rate)
            report, raw, error = execute_one(cfg, scheduler, workload)
            if error is not None:
                rows.append(
                    [_cell(rate), scheduler] + [""] * 8 + [f"error: {error}"]
                )
                continue
            write_run_dir(cfg, label, report, raw)
            runs[label] = _manifest_entry(cfg, scheduler, rate)
            rows.append(
                [
                    _cell(rate),
                    scheduler,
                    _cell(report.ttft_mean_ms),
                    _cell(report.tpot_mean_ms),
                    _cell(report.e2el_mean_ms),
                    _cell(report.throughput_tokens_per_s),
                    _cell(report.slo_attainment),
                    _cell(report.token_stddev),
                    _cell(report.bubble_mean),
                    ";".join(str(f) for f in report.bubble_fractions),
                    "ok",
                ]
            )
    os.makedirs(cfg.outdir, exist_ok=True)
    write_atomic(os.path.join(cfg.outdir, "sweep.csv"), csv_text(SWEEP_COLUMNS, rows))
    write_manifest(cfg, runs)
    print(f"sweep: {len(rows)} rows in {os.path.join(cfg.outdir, 'sweep.csv')}")
    return 0


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    workload = build_workload(cfg)
    whash = workload_sha256(workload)
    rate = None if cfg.source == "trace" else cfg.rate_per_s
    rows: list[list[str]] = []
    runs: dict[str, dict[str, object]] = {}
    for scheduler in ABLATION_ORDER:
        label = run_label(scheduler, cfg, rate)
        report, raw, error = execute_one(cfg, scheduler, workload)
        if error is not None:
            rows.append(
                [scheduler, ABLATION_LABELS[scheduler], whash] + [""] * 8 + [f"error: {error}"]
            )
            continue
        write_run_dir(cfg, label, report, raw)
        runs[label] = _manifest_entry(cfg, scheduler, rate)
        rows.append(
            [
                scheduler,
                ABLATION_LABELS[scheduler],
                whash,
                _cell(report.ttft_mean_ms),
                _cell(report.tpot_mean_ms),
                _cell(report.e2el_mean_ms),
                _cell(report.throughput_tokens_per_s),
                _cell(report.slo_attainment),
                _cell(report.token_stddev),
                _cell(report.bubble_mean),
                _cell(report.preemptions),
                "ok",
            ]
        )
    os.makedirs(cfg.outdir, exist_ok=True)
    write_atomic(os.path.join(cfg.outdir, "ablation.csv"), csv_text(ABLATION_COLUMNS, rows))
    write_manifest(cfg, runs)
    print(f"ablation: {len(rows)} rows in {os.path.join(cfg.outdir, 'ablation.csv')}")
    return 0


def cmd_gen_trace(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.source == "trace" and cfg.resample_rate_per_s is None:
        raise ConfigError("gen-trace synthesizes workloads; set workload.source=poisson "
                          "or workload.resample_rate_per_s")
    workload = build_workload(cfg)
    save_trace(workload, args.out)
    print(f"wrote {args.out} ({len(workload)} requests)")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", default=None, help="JSON config file")
    for key in CONFIG_KEYS:
        parser.add_argument(f"--{key}", dest=key, default=None, metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokensim",
        description="Deterministic simulator of pipeline-parallel LLM serving schedulers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one workload with one scheduler")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep request rates over the configured schedulers")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare throttle variants and the fixed-budget baseline")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-trace", help="synthesize a workload and save it as a JSONL trace")
    _add_common(p)
    p.add_argument("-o", "--out", required=True, help="output trace path")
    p.set_defaults(func=cmd_gen_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key) for key in CONFIG_KEYS if getattr(args, key, None) is not None
    }
    try:
        cfg = parse_config(args.config, overrides)
        return args.func(cfg, args)
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
