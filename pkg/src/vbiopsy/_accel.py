"""Numba switch.

Set ``VB_NUMBA=0`` to force the pure-numpy kernels (useful for debugging and
for the benchmark).  When numba is missing the numpy path is used silently.
"""

import os

_flag = os.environ.get("VB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    prange = range

USE_NUMBA = HAVE_NUMBA and _flag


def set_backend(use_numba):
    """Switch kernel backend at runtime; returns the previous setting."""
    global USE_NUMBA
    prev = USE_NUMBA
    USE_NUMBA = bool(use_numba) and HAVE_NUMBA
    return prev


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
