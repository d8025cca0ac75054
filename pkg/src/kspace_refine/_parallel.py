import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "KSPACE_REFINE_THREADS"


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get(ENV_THREADS, "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``list(map(fn, items))``, threaded when KSPACE_REFINE_THREADS > 1; order preserved."""
    items = list(items)
    n = min(max_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
