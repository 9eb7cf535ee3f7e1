"""Order-preserving chunked map over rows, backed by a thread pool."""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

import numpy as np

from feasiflow.app.settings import get_default_threads

T = TypeVar("T")

DEFAULT_CHUNK_ROWS = 256


def map_row_chunks(
    fn: Callable[[np.ndarray], T],
    rows: np.ndarray,
    threads: Optional[int] = None,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> List[T]:
    """Apply `fn` to consecutive row blocks; results come back in row order."""
    chunks = [rows[start:start + chunk_rows] for start in range(0, len(rows), chunk_rows)]
    workers = min(get_default_threads(threads), max(1, len(chunks)))
    if workers == 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
