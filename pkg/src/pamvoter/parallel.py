"""Chunked replica execution.

Work is split into fixed chunks whose boundaries depend only on the replica
count, and every replica writes to its own output slot, so results are
identical for any number of workers.  The JIT kernels release the GIL, which
is what makes a thread pool useful here.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

DEFAULT_CHUNK = 256


def chunks(n: int, size: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def run_chunked(fn: Callable[[int, int], None], n: int, workers: int = 1,
                size: int = DEFAULT_CHUNK) -> None:
    """Call ``fn(start, stop)`` over fixed chunks of ``range(n)``."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    parts = chunks(n, size)
    if workers == 1 or len(parts) <= 1:
        for a, b in parts:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(fn, a, b) for a, b in parts]:
            fut.result()
