"""Paged KV cache bookkeeping.

Tokens are stored in fixed-size pages allocated per request. Allocation is
all-or-nothing: a request either gets every page its new tokens need or the
cache is left untouched. Eviction releases a request's pages in one step;
the scheduler decides who gets evicted (see select_preemption_victim).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigError


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def pages_needed(current_tokens: int, new_tokens: int, page_size: int) -> int:
    """Extra pages required to grow a request from current to current+new tokens."""
    if page_size < 1:
        raise ConfigError(f"page_size must be >= 1, got {page_size}")
    if current_tokens < 0 or new_tokens < 0:
        raise ConfigError("token counts must be >= 0")
    return _ceil_div(current_tokens + new_tokens, page_size) - _ceil_div(current_tokens, page_size)


@dataclass(frozen=True)
class KvConfig:
    total_pages: int
    page_size: int

    def __post_init__(self) -> None:
        if self.total_pages < 1:
            raise ConfigError(f"kv.total_pages must be >= 1, got {self.total_pages}")
        if self.page_size < 1:
            raise ConfigError(f"kv.page_size must be >= 1, got {self.page_size}")

    @property
    def total_tokens(self) -> int:
        return self.total_pages * self.page_size


class KvCacheState:
    """Mutable page pool with per-request token and page counts."""

    def __init__(self, config: KvConfig):
        self.config = config
        self.free_pages = config.total_pages
        self._tokens: dict[int, int] = {}
        self._pages: dict[int, int] = {}

    def stored_tokens(self, request_id: int) -> int:
        return self._tokens.get(request_id, 0)

    def pages(self, request_id: int) -> int:
        return self._pages.get(request_id, 0)

    @property
    def allocated_pages(self) -> int:
        return sum(self._pages.values())

    @property
    def holders(self) -> tuple[int, ...]:
        return tuple(self._pages)

    def idle_rate(self) -> float:
        """Fraction of pages currently free."""
        return self.free_pages / self.config.total_pages

    def allocate(self, request_id: int, new_tokens: int) -> bool:
        """Grow a request by new_tokens. Returns False (no change) if pages run out."""
        if new_tokens < 0:
            raise ConfigError(f"new_tokens must be >= 0, got {new_tokens}")
        if new_tokens == 0:
            return True
        current = self._tokens.get(request_id, 0)
        need = pages_needed(current, new_tokens, self.config.page_size)
        if need > self.free_pages:
            return False
        self.free_pages -= need
        self._tokens[request_id] = current + new_tokens
        self._pages[request_id] = self._pages.get(request_id, 0) + need
        return True

    def release(self, request_id: int) -> int:
        """Free every page a request holds; returns the page count released."""
        if request_id not in self._pages:
            raise KeyError(f"request {request_id} holds no pages")
        pages = self._pages.pop(request_id)
        del self._tokens[request_id]
        self.free_pages += pages
        return pages


def select_preemption_victim(candidates: Iterable[tuple[int, float]]) -> int | None:
    """Pick the eviction victim from (request_id, arrival_ms) pairs.

    Latest arrival loses; ties broken by larger id (the last request to
    arrive under FCFS ordering).
    """
    best: tuple[float, int] | None = None
    for request_id, arrival_ms in candidates:
        key = (arrival_ms, request_id)
        if best is None or key > best:
            best = key
    return None if best is None else best[1]
