"""Request workloads: synthetic generators and JSONL trace files.

All randomness flows through ``numpy.random.Generator(numpy.random.PCG64(seed))``
so a (seed, rate, distribution) triple reproduces the same workload on any
platform. Arrival gaps and request lengths draw from two generators seeded
``seed`` and ``seed + 1`` respectively, so either stream can be regenerated
independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TraceError

# Token-count clamp applied to every sampled length.
DEFAULT_MIN_TOKENS = 1
DEFAULT_MAX_TOKENS = 128 * 1024

# Bundled empirical (input_tokens, output_tokens) tables. The conversation
# table averages 300 in / 200 out; the code-assist table averages 1563 in /
# 332 out, i.e. 5.21x longer prompts and 1.66x longer outputs.
_SHAREGPT_LIKE: tuple[tuple[int, int], ...] = (
    (120, 60),
    (180, 90),
    (220, 120),
    (260, 150),
    (280, 180),
    (310, 210),
    (340, 240),
    (390, 280),
    (430, 320),
    (470, 350),
)

_AZURE_LIKE: tuple[tuple[int, int], ...] = (
    (520, 100),
    (780, 150),
    (1040, 200),
    (1250, 250),
    (1420, 300),
    (1610, 350),
    (1840, 400),
    (2080, 450),
    (2370, 520),
    (2720, 600),
)

_BUILTIN_TABLES: dict[str, tuple[tuple[int, int], ...]] = {
    "sharegpt-like": _SHAREGPT_LIKE,
    "azure-like": _AZURE_LIKE,
}


@dataclass(frozen=True)
class RequestSpec:
    """One request: when it arrives and how many tokens it moves."""

    id: int
    arrival_ms: float
    input_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.input_tokens < 1:
            raise ConfigError(f"request {self.id}: input_tokens must be >= 1, got {self.input_tokens}")
        if self.output_tokens < 1:
            raise ConfigError(f"request {self.id}: output_tokens must be >= 1, got {self.output_tokens}")
        if self.arrival_ms < 0:
            raise ConfigError(f"request {self.id}: arrival_ms must be >= 0, got {self.arrival_ms}")


@dataclass(frozen=True)
class ArrivalProcess:
    """Arrival-time source: a Poisson process or a fixed list of times."""

    kind: str
    rate_per_s: float = 0.0
    times_ms: tuple[float, ...] = ()
    seed: int = 0

    @classmethod
    def poisson(cls, rate_per_s: float, seed: int = 0) -> ArrivalProcess:
        return cls(kind="poisson", rate_per_s=rate_per_s, seed=seed)

    @classmethod
    def fixed(cls, times_ms: tuple[float, ...] | list[float]) -> ArrivalProcess:
        return cls(kind="fixed", times_ms=tuple(times_ms))


@dataclass(frozen=True)
class LengthDistribution:
    """Sampler for (input_tokens, output_tokens) pairs.

    kind "fixed": every request is (fixed_input, fixed_output).
    kind "lognormal": lengths are lognormal with true mean ``mean_*`` and
    shape ``sigma_*`` (the underlying normal gets mu = ln(mean) - sigma^2/2).
    kind "empirical": rows sampled uniformly from ``table``.
    Every sample is rounded and clamped to [min_tokens, max_tokens].
    """

    kind: str
    fixed_input: int = 0
    fixed_output: int = 0
    mean_input: float = 0.0
    sigma_input: float = 0.0
    mean_output: float = 0.0
    sigma_output: float = 0.0
    table: tuple[tuple[int, int], ...] = ()
    min_tokens: int = DEFAULT_MIN_TOKENS
    max_tokens: int = DEFAULT_MAX_TOKENS

    @classmethod
    def fixed(cls, input_tokens: int, output_tokens: int, **clamps: int) -> LengthDistribution:
        return cls(kind="fixed", fixed_input=input_tokens, fixed_output=output_tokens, **clamps)

    @classmethod
    def lognormal(
        cls,
        mean_input: float,
        sigma_input: float,
        mean_output: float,
        sigma_output: float,
        **clamps: int,
    ) -> LengthDistribution:
        return cls(
            kind="lognormal",
            mean_input=mean_input,
            sigma_input=sigma_input,
            mean_output=mean_output,
            sigma_output=sigma_output,
            **clamps,
        )

    @classmethod
    def empirical(cls, table: tuple[tuple[int, int], ...] | list[tuple[int, int]], **clamps: int) -> LengthDistribution:
        return cls(kind="empirical", table=tuple(tuple(row) for row in table), **clamps)


def builtin_length_table(name: str) -> LengthDistribution:
    """Return a bundled empirical distribution by name."""
    try:
        table = _BUILTIN_TABLES[name]
    except KeyError:
        raise ConfigError(
            f"unknown length table {name!r}; available: {', '.join(sorted(_BUILTIN_TABLES))}"
        ) from None
    return LengthDistribution.empirical(table)


def generate_arrivals(process: ArrivalProcess, n: int) -> list[float]:
    """Produce n arrival times in ms, non-decreasing from time 0."""
    if n < 0:
        raise ConfigError(f"request count must be >= 0, got {n}")
    if process.kind == "poisson":
        if process.rate_per_s <= 0:
            raise ConfigError(f"poisson rate must be > 0, got {process.rate_per_s}")
        if n == 0:
            return []
        rng = np.random.Generator(np.random.PCG64(process.seed))
        gaps = rng.exponential(1000.0 / process.rate_per_s, n)
        return [float(t) for t in np.cumsum(gaps)]
    if process.kind == "fixed":
        times = list(process.times_ms)
        if len(times) != n:
            raise ConfigError(f"fixed arrival list has {len(times)} entries, expected {n}")
        for i in range(1, len(times)):
            if times[i] < times[i - 1]:
                raise ConfigError(
                    f"fixed arrivals must be non-decreasing; entry {i} is {times[i]} after {times[i - 1]}"
                )
        if times and times[0] < 0:
            raise ConfigError(f"arrival times must be >= 0, got {times[0]}")
        return [float(t) for t in times]
    raise ConfigError(f"unknown arrival process kind {process.kind!r}")


def _clamp(value: float, lo: int, hi: int) -> int:
    return max(lo, min(hi, int(math.floor(value + 0.5))))


def sample_lengths(dist: LengthDistribution, n: int, seed: int) -> list[tuple[int, int]]:
    """Draw n (input_tokens, output_tokens) pairs."""
    if n < 0:
        raise ConfigError(f"request count must be >= 0, got {n}")
    lo, hi = dist.min_tokens, dist.max_tokens
    if lo < 1 or hi < lo:
        raise ConfigError(f"length clamp must satisfy 1 <= min <= max, got [{lo}, {hi}]")
    if dist.kind == "fixed":
        pair = (_clamp(dist.fixed_input, lo, hi), _clamp(dist.fixed_output, lo, hi))
        return [pair] * n
    if dist.kind == "lognormal":
        if dist.mean_input <= 0 or dist.mean_output <= 0:
            raise ConfigError("lognormal means must be > 0")
        if dist.sigma_input < 0 or dist.sigma_output < 0:
            raise ConfigError("lognormal sigmas must be >= 0")
        rng = np.random.Generator(np.random.PCG64(seed))
        mu_in = math.log(dist.mean_input) - dist.sigma_input**2 / 2.0
        mu_out = math.log(dist.mean_output) - dist.sigma_output**2 / 2.0
        ins = rng.lognormal(mu_in, dist.sigma_input, n)
        outs = rng.lognormal(mu_out, dist.sigma_output, n)
        return [(_clamp(i, lo, hi), _clamp(o, lo, hi)) for i, o in zip(ins, outs)]
    if dist.kind == "empirical":
        if not dist.table:
            raise ConfigError("empirical length table is empty")
        rng = np.random.Generator(np.random.PCG64(seed))
        rows = rng.integers(0, len(dist.table), n)
        return [(_clamp(dist.table[r][0], lo, hi), _clamp(dist.table[r][1], lo, hi)) for r in rows]
    raise ConfigError(f"unknown length distribution kind {dist.kind!r}")


def synthesize_requests(
    process: ArrivalProcess,
    dist: LengthDistribution,
    n: int,
    length_seed: int | None = None,
) -> list[RequestSpec]:
    """Build a workload: arrivals from the process, lengths from the distribution."""
    arrivals = generate_arrivals(process, n)
    seed = process.seed + 1 if length_seed is None else length_seed
    lengths = sample_lengths(dist, n, seed)
    return [
        RequestSpec(id=i, arrival_ms=t, input_tokens=pair[0], output_tokens=pair[1])
        for i, (t, pair) in enumerate(zip(arrivals, lengths))
    ]


def _require_int(obj: dict, key: str, path: str, lineno: int) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceError(f"{path}:{lineno}: field {key!r} must be an integer, got {value!r}")
    return value


def load_trace(path: str) -> list[RequestSpec]:
    """Read a JSONL trace: one request object per line.

    Required fields: arrival_ms (number), input_tokens, output_tokens
    (positive integers). Ids follow line order; the result is sorted by
    (arrival_ms, id).
    """
    specs: list[RequestSpec] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise TraceError(f"{path}:{lineno}: expected a JSON object")
            for key in ("arrival_ms", "input_tokens", "output_tokens"):
                if key not in obj:
                    raise TraceError(f"{path}:{lineno}: missing field {key!r}")
            arrival = obj["arrival_ms"]
            if isinstance(arrival, bool) or not isinstance(arrival, (int, float)):
                raise TraceError(f"{path}:{lineno}: field 'arrival_ms' must be a number, got {arrival!r}")
            itok = _require_int(obj, "input_tokens", path, lineno)
            otok = _require_int(obj, "output_tokens", path, lineno)
            try:
                specs.append(
                    RequestSpec(
                        id=len(specs),
                        arrival_ms=float(arrival),
                        input_tokens=itok,
                        output_tokens=otok,
                    )
                )
            except ConfigError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
    specs.sort(key=lambda s: (s.arrival_ms, s.id))
    return specs


def save_trace(specs: list[RequestSpec], path: str) -> None:
    """Write a JSONL trace that load_trace reads back identically."""
    with open(path, "w", encoding="utf-8") as fh:
        for spec in specs:
            fh.write(
                json.dumps(
                    {
                        "arrival_ms": spec.arrival_ms,
                        "input_tokens": spec.input_tokens,
                        "output_tokens": spec.output_tokens,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
