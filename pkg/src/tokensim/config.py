"""Configuration: one JSON file, every key mirrored as a --section.key flag.

The file may nest sections ({"sched": {"T": 4}}) or use flat dotted keys
({"sched.T": 4}); flags always win over the file, the file over defaults.
Unknown keys are rejected with the full list of valid keys.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Mapping

from .engine import CommModel, PipelineConfig, StageCostModel
from .errors import ConfigError
from .kvcache import KvConfig
from .sched import THROTTLE_MODES, ThrottleConfig

SCHEDULER_NAMES = ("throttle", "sarathi", "throttle-wt-only", "throttle-ut-only")

# Report labels for the ablation table, keyed by scheduler name.
ABLATION_LABELS = {
    "throttle": "Token Throttling",
    "throttle-ut-only": "w/o WT",
    "throttle-wt-only": "w/o UT",
    "sarathi": "w/ CK",
}

LENGTH_KINDS = ("fixed", "lognormal", "sharegpt-like", "azure-like")
COMM_PRESETS = ("pcie", "network", "custom")

# kind -> (coerce from CLI string, check/convert JSON value)
_KINDS = ("int", "float", "opt_float", "bool", "str", "opt_str", "float_list", "str_list")


@dataclass(frozen=True)
class _Key:
    kind: str
    default: object
    choices: tuple[str, ...] | None = None


_SCHEMA: dict[str, _Key] = {
    "workload.source": _Key("str", "poisson", ("poisson", "trace")),
    "workload.trace_path": _Key("opt_str", None),
    "workload.resample_rate_per_s": _Key("opt_float", None),
    "workload.rate_per_s": _Key("float", 2.0),
    "workload.num_requests": _Key("int", 64),
    "workload.seed": _Key("int", 0),
    "workload.lengths": _Key("str", "sharegpt-like", LENGTH_KINDS),
    "workload.fixed_input": _Key("int", 128),
    "workload.fixed_output": _Key("int", 32),
    "workload.mean_input": _Key("float", 300.0),
    "workload.sigma_input": _Key("float", 0.6),
    "workload.mean_output": _Key("float", 200.0),
    "workload.sigma_output": _Key("float", 0.6),
    "workload.min_tokens": _Key("int", 1),
    "workload.max_tokens": _Key("int", 131072),
    "run.scheduler": _Key("str", "throttle", SCHEDULER_NAMES),
    "run.outdir": _Key("opt_str", None),
    "run.horizon_ms": _Key("opt_float", None),
    "run.events_log": _Key("bool", False),
    "run.slo_ttft_ms": _Key("float", 3000.0),
    "run.slo_tpot_ms": _Key("float", 150.0),
    "sched.T": _Key("int", 8),
    "sched.max_p": _Key("int", 2048),
    "sched.min_p": _Key("int", 32),
    "sched.kv_thresh": _Key("float", 0.05),
    "sched.mode": _Key("str", "combined", THROTTLE_MODES),
    "sched.token_budget": _Key("int", 2048),
    "pipeline.depth": _Key("int", 4),
    "pipeline.c0_ms": _Key("float", 1.0),
    "pipeline.c_tok_ms": _Key("float", 0.01),
    "pipeline.c_ctx_ms": _Key("float", 0.1),
    "pipeline.comm": _Key("str", "pcie", COMM_PRESETS),
    "pipeline.comm_latency_ms": _Key("float", 0.1),
    "pipeline.bytes_per_token": _Key("float", 16384.0),
    "pipeline.bandwidth_bytes_per_ms": _Key("opt_float", None),
    "kv.total_pages": _Key("int", 4096),
    "kv.page_size": _Key("int", 16),
    "sweep.rates": _Key("float_list", (1.0, 2.0, 4.0)),
    "sweep.schedulers": _Key("str_list", ("throttle", "sarathi")),
}

CONFIG_KEYS = tuple(_SCHEMA)


def _unknown(key: str) -> ConfigError:
    return ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}")


def _coerce_string(key: str, kind: str, text: str) -> object:
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "opt_float":
            return None if text.strip().lower() in ("", "none") else float(text)
        if kind == "bool":
            lower = text.strip().lower()
            if lower in ("true", "1", "yes"):
                return True
            if lower in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind == "opt_str":
            return None if text == "" else text
        if kind == "float_list":
            return tuple(float(part) for part in text.split(",") if part.strip())
        if kind == "str_list":
            return tuple(part.strip() for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r} expects a {kind} value, got {text!r}") from None
    raise AssertionError(f"unhandled kind {kind}")


def _check_json(key: str, kind: str, value: object) -> object:
    bad = ConfigError(f"config key {key!r} expects a {kind} value, got {value!r}")
    if isinstance(value, str) and kind not in ("str", "opt_str"):
        # Allow string forms in files too, same as flags.
        return _coerce_string(key, kind, value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if kind == "opt_float":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise bad
        return value
    if kind == "opt_str":
        if value is None or isinstance(value, str):
            return value
        raise bad
    if kind == "float_list":
        if not isinstance(value, (list, tuple)):
            raise bad
        out = []
        for item in value:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise bad
            out.append(float(item))
        return tuple(out)
    if kind == "str_list":
        if not isinstance(value, (list, tuple)) or not all(isinstance(i, str) for i in value):
            raise bad
        return tuple(value)
    raise AssertionError(f"unhandled kind {kind}")


def _flatten_file(obj: object, path: str) -> dict[str, object]:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config file must contain a JSON object")
    flat: dict[str, object] = {}
    for key, value in obj.items():
        if isinstance(value, dict) and "." not in key:
            for sub, subval in value.items():
                flat[f"{key}.{sub}"] = subval
        else:
            flat[key] = value
    return flat


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved and validated configuration for any subcommand."""

    scheduler: str
    outdir: str
    horizon_ms: float | None
    events_log: bool
    slo_ttft_ms: float
    slo_tpot_ms: float
    source: str
    trace_path: str | None
    resample_rate_per_s: float | None
    rate_per_s: float
    num_requests: int
    seed: int
    lengths: str
    fixed_input: int
    fixed_output: int
    mean_input: float
    sigma_input: float
    mean_output: float
    sigma_output: float
    min_tokens: int
    max_tokens: int
    throttle: ThrottleConfig
    token_budget: int
    pipeline: PipelineConfig
    kv: KvConfig
    sweep_rates: tuple[float, ...]
    sweep_schedulers: tuple[str, ...]
    resolved: dict[str, object]


def _build_comm(values: dict[str, object]) -> CommModel:
    preset = values["pipeline.comm"]
    latency = values["pipeline.comm_latency_ms"]
    payload = values["pipeline.bytes_per_token"]
    if preset == "pcie":
        return CommModel.pcie(latency, payload)
    if preset == "network":
        return CommModel.network(latency, payload)
    bandwidth = values["pipeline.bandwidth_bytes_per_ms"]
    if bandwidth is None:
        raise ConfigError("pipeline.comm=custom requires pipeline.bandwidth_bytes_per_ms")
    return CommModel(latency, payload, bandwidth)


def parse_config(path: str | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Merge defaults, the config file, and flag overrides into a RunConfig."""
    values: dict[str, object] = {key: spec.default for key, spec in _SCHEMA.items()}

    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if text.strip():
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc.msg} (line {exc.lineno})") from None
            for key, value in _flatten_file(loaded, path).items():
                if key not in _SCHEMA:
                    raise _unknown(key)
                values[key] = _check_json(key, _SCHEMA[key].kind, value)

    if overrides:
        for key, value in overrides.items():
            if key not in _SCHEMA:
                raise _unknown(key)
            kind = _SCHEMA[key].kind
            if isinstance(value, str):
                values[key] = _coerce_string(key, kind, value)
            else:
                values[key] = _check_json(key, kind, value)

    for key, spec in _SCHEMA.items():
        if spec.choices is not None and values[key] not in spec.choices:
            raise ConfigError(
                f"config key {key!r} must be one of {', '.join(spec.choices)}; got {values[key]!r}"
            )

    outdir = values["run.outdir"]
    if outdir is None:
        outdir = os.environ.get("TOKENSIM_OUTDIR", "runs")

    source = values["workload.source"]
    trace_path = values["workload.trace_path"]
    if source == "trace":
        if not trace_path:
            raise ConfigError("workload.source=trace requires workload.trace_path")
        if not os.path.isfile(trace_path):
            raise ConfigError(f"workload.trace_path does not exist: {trace_path}")

    if values["workload.num_requests"] < 0:
        raise ConfigError(f"workload.num_requests must be >= 0, got {values['workload.num_requests']}")
    if not 1 <= values["workload.min_tokens"] <= values["workload.max_tokens"]:
        raise ConfigError("need 1 <= workload.min_tokens <= workload.max_tokens")
    if values["run.slo_ttft_ms"] <= 0 or values["run.slo_tpot_ms"] <= 0:
        raise ConfigError("SLO limits must be > 0")
    if values["run.horizon_ms"] is not None and values["run.horizon_ms"] < 0:
        raise ConfigError("run.horizon_ms must be >= 0")

    rates = values["sweep.rates"]
    if not rates or any(r <= 0 for r in rates):
        raise ConfigError("sweep.rates must be a non-empty list of positive rates")
    scheds = values["sweep.schedulers"]
    if not scheds:
        raise ConfigError("sweep.schedulers must not be empty")
    for name in scheds:
        if name not in SCHEDULER_NAMES:
            raise ConfigError(
                f"sweep scheduler {name!r} unknown; valid: {', '.join(SCHEDULER_NAMES)}"
            )

    throttle = ThrottleConfig(
        T=values["sched.T"],
        max_p=values["sched.max_p"],
        min_p=values["sched.min_p"],
        kv_thresh=values["sched.kv_thresh"],
        mode=values["sched.mode"],
    )
    if values["sched.token_budget"] < 1:
        raise ConfigError(f"sched.token_budget must be >= 1, got {values['sched.token_budget']}")
    pipeline = PipelineConfig(
        depth=values["pipeline.depth"],
        cost=StageCostModel(
            c0=values["pipeline.c0_ms"],
            c_tok=values["pipeline.c_tok_ms"],
            c_ctx=values["pipeline.c_ctx_ms"],
        ),
        comm=_build_comm(values),
    )
    kv = KvConfig(total_pages=values["kv.total_pages"], page_size=values["kv.page_size"])

    resolved = dict(values)
    resolved["run.outdir"] = outdir

    return RunConfig(
        scheduler=values["run.scheduler"],
        outdir=outdir,
        horizon_ms=values["run.horizon_ms"],
        events_log=values["run.events_log"],
        slo_ttft_ms=values["run.slo_ttft_ms"],
        slo_tpot_ms=values["run.slo_tpot_ms"],
        source=source,
        trace_path=trace_path,
        resample_rate_per_s=values["workload.resample_rate_per_s"],
        rate_per_s=values["workload.rate_per_s"],
        num_requests=values["workload.num_requests"],
        seed=values["workload.seed"],
        lengths=values["workload.lengths"],
        fixed_input=values["workload.fixed_input"],
        fixed_output=values["workload.fixed_output"],
        mean_input=values["workload.mean_input"],
        sigma_input=values["workload.sigma_input"],
        mean_output=values["workload.mean_output"],
        sigma_output=values["workload.sigma_output"],
        min_tokens=values["workload.min_tokens"],
        max_tokens=values["workload.max_tokens"],
        throttle=throttle,
        token_budget=values["sched.token_budget"],
        pipeline=pipeline,
        kv=kv,
        sweep_rates=tuple(rates),
        sweep_schedulers=tuple(scheds),
        resolved=resolved,
    )


def resolve_scheduler(name: str, base_mode: str) -> tuple[str, str]:
    """Map a scheduler name to (engine policy, throttle mode)."""
    if name == "throttle":
        return "throttle", base_mode
    if name == "throttle-wt-only":
        return "throttle", "wt_only"
    if name == "throttle-ut-only":
        return "throttle", "ut_only"
    if name == "sarathi":
        return "sarathi", base_mode
    raise ConfigError(f"scheduler must be one of {SCHEDULER_NAMES}, got {name!r}")


def config_sha256(resolved: Mapping[str, object], extra: Mapping[str, object] | None = None) -> str:
    """Stable hash of a resolved config (plus per-run overrides) for manifests."""
    doc = dict(resolved)
    if extra:
        doc.update(extra)
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
