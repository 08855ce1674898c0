"""Deterministic chunked parallel map.

Work is split into tasks by the caller (fixed chunk sizes, fixed stream ids),
so every task computes the same numbers whatever the worker count; results
are returned in task order and reduced by the caller in that order.
"""

from __future__ import annotations

import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from typing import Callable, Iterable, List


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def parallel_map(fn: Callable, tasks: Iterable, workers: int = 1) -> List:
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    try:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    except (pickle.PicklingError, AttributeError, TypeError, BrokenProcessPool):
        # closures cannot be pickled; fall back to serial evaluation
        return [fn(t) for t in tasks]
