"""Numba switch.

Set ``COLEP_DISABLE_JIT=1`` to run every kernel through the pure-numpy
implementations (useful for debugging or platforms without numba).
"""

import os

_FALSEY = {"0", "false", "no", "off", ""}

JIT_REQUESTED = os.environ.get("COLEP_DISABLE_JIT", "0").strip().lower() in _FALSEY

# the system TBB is too old for numba; skip it instead of warning on every run
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    def prange(*args):
        return range(*args)


JIT_ENABLED = HAVE_NUMBA and JIT_REQUESTED


def set_thread_cap(n_threads=None):
    """Cap numba's worker pool, reading ``COLEP_THREADS`` when no value is given."""
    if n_threads is None:
        raw = os.environ.get("COLEP_THREADS")
        if not raw:
            return None
        n_threads = int(raw)
    if n_threads < 1:
        raise ValueError("thread cap must be positive")
    if not HAVE_NUMBA:
        return None
    n_threads = min(n_threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n_threads)
    return n_threads
