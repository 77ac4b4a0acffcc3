# mbot_core/parallel.py - Worker pool shared by the batch solvers
import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_jobs(jobs: int) -> int:
    """0 (or negative) means hardware parallelism"""
    if jobs is None or jobs <= 0:
        return os.cpu_count() or 1
    return int(jobs)


def ordered_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> Iterator[R]:
    """Map ``func`` over ``items`` and yield results in input order

    Work runs on a thread pool with a bounded window of pending tasks, so
    callers can accumulate results sequentially while solves overlap.
    """
    workers = resolve_jobs(jobs)
    if workers == 1:
        for item in items:
            yield func(item)
        return

    window = 2 * workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for item in items:
            pending.append(pool.submit(func, item))
            if len(pending) >= window:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
