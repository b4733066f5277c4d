"""Fork-join execution context.

Data-parallel work in this package is expressed as batched numpy operations
(which run in C and release the GIL inside BLAS/LAPACK); the execution
context additionally lets callers split large batches across worker threads.
A context with ``threads=1`` degrades to plain serial evaluation, so library
code can call :meth:`ExecContext.map` unconditionally.
"""

import os
from concurrent.futures import ThreadPoolExecutor


class ExecContext:
    """Thread-pool wrapper passed down from the CLI to scan/fit internals."""

    def __init__(self, threads=1):
        if threads is None or threads <= 0:
            threads = os.cpu_count() or 1
        self.threads = int(threads)
        self._pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) <= 1:
            return [fn(it) for it in items]
        return list(self._pool.map(fn, items))

    def chunk_slices(self, n, min_chunk=256):
        """Split range(n) into at most ``threads`` contiguous slices."""
        if self.threads <= 1 or n <= min_chunk:
            return [slice(0, n)]
        k = min(self.threads, max(1, n // min_chunk))
        bounds = [round(i * n / k) for i in range(k + 1)]
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


SERIAL = ExecContext(threads=1)
