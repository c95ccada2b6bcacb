"""Chunked execution with an optional thread pool.

Work is always split into fixed-size row chunks, independent of the thread
count, and every chunk writes to a disjoint output range. Results are
therefore bit-identical whether a chunk runs on the pool or inline.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_num_threads = 1


def set_num_threads(n: int) -> None:
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


def run_chunked(fn, n_rows: int, chunk_rows: int) -> None:
    """Call fn(start, stop) for every chunk of [0, n_rows).

    fn must write its results into preallocated arrays; return values are
    discarded. chunk_rows must not depend on the thread count.
    """
    if n_rows <= 0:
        return
    chunk_rows = max(1, int(chunk_rows))
    spans = [(s, min(s + chunk_rows, n_rows)) for s in range(0, n_rows, chunk_rows)]
    if _num_threads == 1 or len(spans) == 1:
        for start, stop in spans:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=_num_threads) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in spans]
        for fut in futures:
            fut.result()
