"""Micro-batch planning policies.

Two policies build each micro-batch:

* throttled: decode tokens are split evenly across the pipeline depth
  (ceil(RD / depth) per batch) and prefill tokens are throttled by the
  waiting-token term (WP / T), the cache-utilization term
  (max_p scaled by free-cache headroom), or both, with a low-cache
  suspend threshold.
* sarathi: fixed token budget, all eligible decodes first, remaining
  budget filled with chunked prefill.

Planning functions are pure: they read a state snapshot and return a plan
without touching cache or queue state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError
from .kvcache import pages_needed

THROTTLE_MODES = ("combined", "wt_only", "ut_only")

# Guard against binary float noise when a formula's exact value is integral
# (e.g. 2048 * 0.475 / 0.95 evaluates to 1024.0000000000002).
_CEIL_EPS = 1e-9


def snap_ceil(x: float) -> int:
    """Round up, treating values within 1e-9 of an integer as that integer."""
    return math.ceil(x - _CEIL_EPS)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ThrottleConfig:
    """Hyperparameters of the throttled policy."""

    T: int = 8
    max_p: int = 2048
    min_p: int = 32
    kv_thresh: float = 0.05
    mode: str = "combined"

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ConfigError(f"sched.T must be >= 1, got {self.T}")
        if not 1 <= self.min_p <= self.max_p:
            raise ConfigError(f"need 1 <= min_p <= max_p, got min_p={self.min_p} max_p={self.max_p}")
        if not 0.0 <= self.kv_thresh < 1.0:
            raise ConfigError(f"sched.kv_thresh must be in [0, 1), got {self.kv_thresh}")
        if self.mode not in THROTTLE_MODES:
            raise ConfigError(f"sched.mode must be one of {THROTTLE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class SchedInputs:
    """Snapshot of scheduler-visible state at one planning point."""

    waiting_prefill_tokens: int
    running_decode_tokens: int
    kv_free: float
    pipeline_depth: int

    def __post_init__(self) -> None:
        if self.waiting_prefill_tokens < 0 or self.running_decode_tokens < 0:
            raise ConfigError("scheduler input counts must be >= 0")
        if not 0.0 <= self.kv_free <= 1.0:
            raise ConfigError(f"kv_free must be in [0, 1], got {self.kv_free}")
        if self.pipeline_depth < 1:
            raise ConfigError(f"pipeline_depth must be >= 1, got {self.pipeline_depth}")


@dataclass(frozen=True)
class KvView:
    """Read-only cache numbers a planner may consult."""

    free_pages: int
    total_pages: int
    page_size: int


@dataclass(frozen=True)
class PrefillCandidate:
    """A waiting or partially prefilled request, FCFS-ordered by the caller."""

    id: int
    remaining_tokens: int
    stored_tokens: int


@dataclass(frozen=True)
class DecodeCandidate:
    """A decode-phase request not currently in flight, FCFS-ordered by the caller."""

    id: int
    stored_tokens: int

    @property
    def context_tokens(self) -> int:
        # KV length attended over when its next token is computed.
        return self.stored_tokens + 1


@dataclass
class MicroBatchPlan:
    """One micro-batch: decode ids (one token each) plus prefill chunks."""

    decode_ids: list[int] = field(default_factory=list)
    prefill_chunks: list[tuple[int, int]] = field(default_factory=list)
    decode_context_tokens: int = 0

    @property
    def decode_tokens(self) -> int:
        return len(self.decode_ids)

    @property
    def prefill_tokens(self) -> int:
        return sum(tokens for _, tokens in self.prefill_chunks)

    @property
    def total_tokens(self) -> int:
        return self.decode_tokens + self.prefill_tokens

    def is_empty(self) -> bool:
        return not self.decode_ids and not self.prefill_chunks


def throttle_prefill_wt(wp: int, cfg: ThrottleConfig) -> int:
    """Waiting-token term: drain WP over T iterations, clamped to [min_p, max_p]."""
    if wp <= 0:
        return 0
    p = min(max(_ceil_div(wp, cfg.T), cfg.min_p), cfg.max_p)
    return min(p, wp)


def throttle_prefill_ut(kv_free: float, cfg: ThrottleConfig) -> int:
    """Cache-utilization term: max_p scaled by the free fraction, floored at min_p."""
    return snap_ceil(max(cfg.max_p * kv_free, float(cfg.min_p)))


def throttle_prefill_combined(wp: int, kv_free: float, cfg: ThrottleConfig) -> int:
    """Both terms with the low-cache suspend threshold."""
    if wp <= 0:
        return 0
    if kv_free <= cfg.kv_thresh:
        return 0
    headroom = (kv_free - cfg.kv_thresh) / (1.0 - cfg.kv_thresh)
    p = snap_ceil(max(min(wp / cfg.T, cfg.max_p * headroom), float(cfg.min_p)))
    return min(p, wp)


def throttle_decode(rd: int, depth: int) -> int:
    """Decode tokens per batch: spread the decode population across the depth."""
    if rd < 0:
        raise ConfigError(f"rd must be >= 0, got {rd}")
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if rd == 0:
        return 0
    return _ceil_div(rd, depth)


def _prefill_token_limit(inputs: SchedInputs, cfg: ThrottleConfig) -> int:
    wp = inputs.waiting_prefill_tokens
    if wp <= 0:
        return 0
    if inputs.kv_free <= cfg.kv_thresh:
        return 0
    if cfg.mode == "combined":
        return throttle_prefill_combined(wp, inputs.kv_free, cfg)
    if cfg.mode == "wt_only":
        return throttle_prefill_wt(wp, cfg)
    return min(throttle_prefill_ut(inputs.kv_free, cfg), wp)


def _fill_prefill_chunks(
    prefill_queue: Sequence[PrefillCandidate],
    token_limit: int,
    avail_pages: int,
    page_size: int,
) -> list[tuple[int, int]]:
    """FCFS chunk fill up to token_limit, truncated by available pages.

    A candidate's partially filled last page holds
    (page_size - stored % page_size) % page_size tokens page-free. The fill
    stops at the first candidate truncated by pages.
    """
    chunks: list[tuple[int, int]] = []
    budget = token_limit
    avail = max(avail_pages, 0)
    for cand in prefill_queue:
        if budget <= 0:
            break
        if cand.remaining_tokens <= 0:
            continue
        want = min(cand.remaining_tokens, budget)
        slack = (page_size - cand.stored_tokens % page_size) % page_size
        fit = slack + avail * page_size
        take = min(want, fit)
        if take <= 0:
            break
        avail -= pages_needed(cand.stored_tokens, take, page_size)
        budget -= take
        chunks.append((cand.id, take))
        if take < want:
            break
    return chunks


def plan_throttled(
    inputs: SchedInputs,
    prefill_queue: Sequence[PrefillCandidate],
    decode_queue: Sequence[DecodeCandidate],
    kv: KvView,
    cfg: ThrottleConfig,
) -> MicroBatchPlan:
    """Throttled plan: even decode split plus throttled prefill fill."""
    d = throttle_decode(inputs.running_decode_tokens, inputs.pipeline_depth)
    selected = list(decode_queue[: min(d, len(decode_queue))])
    decode_pages = sum(pages_needed(c.stored_tokens, 1, kv.page_size) for c in selected)
    p = _prefill_token_limit(inputs, cfg)
    chunks = _fill_prefill_chunks(prefill_queue, p, kv.free_pages - decode_pages, kv.page_size)
    return MicroBatchPlan(
        decode_ids=[c.id for c in selected],
        prefill_chunks=chunks,
        decode_context_tokens=sum(c.context_tokens for c in selected),
    )


def plan_sarathi(
    inputs: SchedInputs,
    prefill_queue: Sequence[PrefillCandidate],
    decode_queue: Sequence[DecodeCandidate],
    kv: KvView,
    token_budget: int,
) -> MicroBatchPlan:
    """Fixed-budget plan: every eligible decode, then chunked prefill."""
    if token_budget < 1:
        raise ConfigError(f"sched.token_budget must be >= 1, got {token_budget}")
    selected = list(decode_queue)
    decode_pages = sum(pages_needed(c.stored_tokens, 1, kv.page_size) for c in selected)
    budget = max(0, token_budget - len(selected))
    budget = min(budget, inputs.waiting_prefill_tokens)
    chunks = _fill_prefill_chunks(prefill_queue, budget, kv.free_pages - decode_pages, kv.page_size)
    return MicroBatchPlan(
        decode_ids=[c.id for c in selected],
        prefill_chunks=chunks,
        decode_context_tokens=sum(c.context_tokens for c in selected),
    )
