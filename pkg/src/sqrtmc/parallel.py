"""Deterministic fan-out of path work to a thread pool.

Paths are split into fixed-size blocks (see rng.BLOCK_SIZE); workers may
pick blocks in any order because every block writes only its own output
slice and all randomness is keyed by absolute path index.  The reduction is
therefore byte-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from . import rng


def run_blocks(n_paths: int, worker: Callable[[int, slice], None], workers: int = 1) -> None:
    """Call ``worker(block_index, path_slice)`` for every fixed-size block."""
    blocks = rng.block_slices(n_paths)
    if workers <= 1 or len(blocks) <= 1:
        for b, sl in blocks:
            worker(b, sl)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, b, sl) for b, sl in blocks]
        for f in futures:
            f.result()
