"""
Useful functions that are common in dashattn
"""
import os
import time

import numpy as np

from dashattn import config
from dashattn.numkit import make_rng


def ensure_dir(directory):
    """Makes sure that the given directory exists."""
    if directory and not os.path.exists(directory):
        os.makedirs(directory)


def time_call(fun, warmups=config.bench.warmups, repeats=config.bench.repeats):
    """Median wall time of a callable.

    Parameters
    ----------
    fun: callable
        Called without arguments.
    warmups: int
        Untimed calls made first.
    repeats: int
        Timed calls.

    Returns
    -------
    median_ms: float
        Median wall time in milliseconds (monotonic clock).
    result: object
        Return value of the last call.
    """
    result = None
    for _ in range(warmups):
        result = fun()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        result = fun()
        times.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(times)), result


def random_inputs(config, seed, dtype=np.float64):
    """Standard normal Q, K, V and summary queries for an `AttnConfig`.

    Returns
    -------
    Q: np.array(n, h_q, d_h)
    K, V: np.array(n, h_kv, d_h)
    q_bar: np.array(h_kv, d_h)
    """
    rng = make_rng(seed)
    Q = rng.standard_normal((config.n, config.h_q, config.d_h))
    K = rng.standard_normal((config.n, config.h_kv, config.d_h))
    V = rng.standard_normal((config.n, config.h_kv, config.d_h))
    q_bar = rng.standard_normal((config.h_kv, config.d_h))
    return Q.astype(dtype), K.astype(dtype), V.astype(dtype), \
        q_bar.astype(dtype)


def max_abs_diff(A, B):
    """Largest absolute entrywise difference of two arrays."""
    return float(np.max(np.abs(np.asarray(A, dtype=np.float64) -
                               np.asarray(B, dtype=np.float64)), initial=0))
