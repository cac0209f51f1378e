"""Deterministic fan-out of path blocks over worker processes.

Blocks are fixed by the problem, never by the worker count, and results come
back in block order, so any worker count yields identical output.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

_JOB: Callable | None = None


def _call(i: int):
    return _JOB(i)


def map_blocks(fn: Callable[[int], T], n_blocks: int, workers: int = 1) -> list[T]:
    """``[fn(0), ..., fn(n_blocks - 1)]`` evaluated on up to ``workers`` processes.

    ``fn`` may be a closure: workers are forked and inherit it, nothing is pickled
    except block indices and results.  Without ``fork`` (macOS spawn, Windows)
    a thread pool is used instead.
    """
    global _JOB
    workers = max(1, min(int(workers), n_blocks))
    if workers == 1:
        return [fn(i) for i in range(n_blocks)]
    try:
        ctx = mp.get_context("fork")
    except ValueError:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, range(n_blocks)))
    _JOB = fn
    try:
        with ctx.Pool(workers) as pool:
            return pool.map(_call, range(n_blocks), chunksize=1)
    finally:
        _JOB = None
