"""Order-preserving fan-out of independent jobs over worker processes."""

from __future__ import annotations

import multiprocessing as mp
import os
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def _init_worker():
    import torch

    torch.set_num_threads(1)


def run_jobs(fn, jobs, workers: int = 1) -> list:
    """``[fn(*job) for job in jobs]``, optionally in a process pool.

    Every job carries its own seed, so the result list is the same for any
    worker count.
    """
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=ctx, initializer=_init_worker) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 31-bit seed from a base seed and string/int keys."""
    ints = [int(seed) & 0xFFFFFFFF] + [stable_hash(k) if isinstance(k, str) else int(k) & 0xFFFFFFFF for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0] >> 1)
