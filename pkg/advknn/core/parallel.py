import logging
from typing import Callable, List, Sequence, TypeVar

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunk_bounds(n: int, chunk_size: int) -> List[slice]:
    """Contiguous slices covering range(n) in order."""
    if n <= 0:
        return []
    return [slice(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def run_parallel(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every item; results come back in input order regardless of ``workers``.

    Threads are used because the heavy lifting is numpy, which releases the GIL.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Dispatching {len(items)} tasks to {workers} workers")
    return Parallel(n_jobs=workers, prefer="threads")(delayed(fn)(item) for item in items)


def map_chunks(fn: Callable[[slice], np.ndarray], n: int, chunk_size: int, workers: int = 1) -> np.ndarray:
    """Concatenate ``fn(chunk)`` over ordered chunks of range(n)."""
    parts = run_parallel(fn, chunk_bounds(n, chunk_size), workers=workers)
    return np.concatenate(parts, axis=0)
