"""Shared plumbing: bounded worker pools for pure per-graph work."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_THREADS_ENV = "KSX_THREADS"


def worker_count() -> int:
    """Worker cap from the KSX_THREADS environment variable (default 1)."""
    raw = os.environ.get(_THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{_THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def map_pure(fn, items: list) -> list:
    """Map a pure function over items, preserving order.

    Runs in a thread pool when KSX_THREADS > 1; results are identical either
    way because callers only pass side-effect-free functions.
    """
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
