"""Order-preserving parallel map for embarrassingly parallel evaluation.

Work items must derive their randomness from their own index (split RNG
streams), so results are identical no matter how many workers run or how
the scheduler interleaves them. RESAMPLE_FORGE_THREADS caps the pool;
the default is the logical core count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "RESAMPLE_FORGE_THREADS"


def worker_count() -> int:
    limit = os.environ.get(ENV_VAR)
    cores = os.cpu_count() or 1
    if limit is not None:
        try:
            return max(1, min(int(limit), cores))
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {limit!r}")
    return cores


def parallel_map(fn, items) -> list:
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
