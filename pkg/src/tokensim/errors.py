"""Exception types shared across the simulator."""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    """A configuration value or combination is invalid."""


class TraceError(SimError):
    """A workload trace file is malformed."""


class UnschedulableError(SimError):
    """Forward progress is impossible for one or more requests."""

    def __init__(self, message: str, request_ids: tuple[int, ...] = ()):
        super().__init__(message)
        self.request_ids = request_ids
