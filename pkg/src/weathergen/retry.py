from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, TypeVar

from .errors import BackendUnavailable, TransportError

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class RetryPolicy:
    """Attempt budget and exponential backoff (``backoff * 2**k``, capped)."""

    max_attempts: int = 3
    backoff: float = 0.5
    max_backoff: float = 8.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int) -> float:
        return min(self.backoff * (2 ** (attempt - 1)), self.max_backoff)


def call_with_retry(fn: Callable[[], T], policy: RetryPolicy, what: str = "request") -> tuple[T, int]:
    """Run ``fn`` until it stops raising :class:`TransportError`.

    Returns ``(result, attempts)``. Raises :class:`BackendUnavailable` with the
    attempt count once the budget is spent. Other exceptions propagate at once.
    """
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return fn(), attempt
        except TransportError as exc:
            if attempt == policy.max_attempts:
                raise BackendUnavailable(
                    f"{what} failed after {attempt} attempts: {exc}", attempts=attempt
                ) from exc
            wait = policy.delay(attempt)
            log.info("%s attempt %d failed (%s); retrying in %.2fs", what, attempt, exc, wait)
            if wait > 0:
                time.sleep(wait)
    raise AssertionError("unreachable")
