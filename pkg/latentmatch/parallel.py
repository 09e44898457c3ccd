"""
Worker pools with deterministic reductions

Work is always cut into blocks whose boundaries depend only on the data
size and a fixed block size; the worker count only decides how many blocks
run at once. Results come back in block order, so every fold over them is
the same regardless of how many workers were used.
"""

import logging
import threading
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import psutil
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# (Parallel, workers, backend, owning thread id) of the innermost open worker_pool
_active_pool = ContextVar("latentmatch_pool", default=None)


def resolve_workers(workers: Optional[int]) -> int:
    """None or 0 means one worker per logical core"""
    if not workers:
        return psutil.cpu_count(logical=True) or 1
    if workers < 0:
        raise ValueError(f"worker count must be non-negative, got {workers}")
    return workers


def fixed_blocks(n: int, block_size: int) -> List[Tuple[int, int]]:
    """Half-open ranges covering [0, n) in blocks of ``block_size``"""
    if block_size <= 0:
        raise ValueError(f"block size must be positive, got {block_size}")
    return [(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def chunked(items: Iterable[T], chunk_size: int) -> Iterable[List[T]]:
    """Split a stream into consecutive lists of ``chunk_size`` items"""
    chunk: List[T] = []
    for item in items:
        chunk.append(item)
        if len(chunk) == chunk_size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def ordered_map(func: Callable[..., R], items: Sequence, workers: int = 1,
                backend: str = "threading") -> List[R]:
    """Apply ``func`` to every item, results in input order

    ``threading`` suits numpy/scipy kernels that release the GIL; ``loky``
    suits pure-Python work.
    """
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    active = _active_pool.get()
    if active is not None and active[1:] == (workers, backend, threading.get_ident()):
        return active[0](delayed(func)(item) for item in items)
    n_jobs = min(workers, len(items))
    return Parallel(n_jobs=n_jobs, backend=backend)(delayed(func)(item) for item in items)


@contextmanager
def worker_pool(workers: int, backend: str = "threading") -> Iterator[Optional[Parallel]]:
    """Keep one set of workers alive for every ``ordered_map`` call in the block

    Calls made with the same worker count and backend reuse the pool instead
    of starting workers per call. Only the thread that opened the pool uses
    it, so tasks running on the pool fall back to their own workers.
    """
    if workers <= 1:
        yield None
        return
    with Parallel(n_jobs=workers, backend=backend) as parallel:
        token = _active_pool.set((parallel, workers, backend, threading.get_ident()))
        try:
            yield parallel
        finally:
            _active_pool.reset(token)
