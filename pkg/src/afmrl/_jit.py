"""Numba toggle shared by every kernel module.

Set ``AFMRL_DISABLE_NUMBA=1`` to run the pure numpy / interpreted path.
The flag is read once at import time.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DISABLED = os.environ.get("AFMRL_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
USE_NUMBA = numba is not None and not DISABLED


def njit(fn=None, **kwargs):
    """``numba.njit`` when enabled, identity otherwise."""
    def wrap(f):
        if USE_NUMBA:
            return numba.njit(cache=True, **kwargs)(f)
        return f

    if fn is None:
        return wrap
    return wrap(fn)


def is_compiled(fn) -> bool:
    return hasattr(fn, "py_func")
