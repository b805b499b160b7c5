"""Order-preserving task execution, serial or over a process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers():
    return os.cpu_count() or 1


def run_tasks(fn, tasks, workers=None):
    """``[fn(*t) for t in tasks]``; with workers > 1 the calls run in worker
    processes.  Every task owns its RNG stream, so results do not depend on
    scheduling."""
    tasks = list(tasks)
    workers = default_workers() if workers is None or workers <= 0 else workers
    if workers == 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, *zip(*tasks)))
