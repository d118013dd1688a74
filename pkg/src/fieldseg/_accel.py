"""Numba switch.

Kernels are written once as plain Python loops and compiled with numba when it
is importable and ``FIELDSEG_DISABLE_NUMBA`` is unset (or ``0``). Otherwise the
kernel modules route to their numpy / pure-Python fallbacks.
"""
from __future__ import annotations

import os

_flag = os.environ.get("FIELDSEG_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by FIELDSEG_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, else the identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
