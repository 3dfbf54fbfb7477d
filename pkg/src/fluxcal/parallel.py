"""Order-preserving map over worker processes.

Results never depend on the worker count: every task carries its own seed.
"""

import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("FLUXCAL_JOBS", "1")))
    except ValueError:
        return 1


def map_ordered(fn, tasks, jobs: int | None = None):
    tasks = list(tasks)
    jobs = default_jobs() if jobs is None else jobs
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
