"""Worker-thread control shared by scoring and evaluation loops.

ALCORE_THREADS caps parallelism (0 or unset = auto). Results are collected
in input order, and every task derives its own seed, so output is identical
at any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "ALCORE_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{ENV_VAR} must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply fn to each item, preserving input order in the result."""
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
