"""Numba switch for the hot kernels.

Set ``SCOREDISTILL_NUMBA=0`` to force the pure-numpy paths. Kernels that
have a compiled variant look at :data:`USE_NUMBA` at call time, so the
flag can also be flipped from tests and benchmarks with :func:`use_numba`.
"""

from __future__ import annotations

import contextlib
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


try:
    import numba

    HAVE_NUMBA = True
    njit = numba.njit
except ImportError:  # pragma: no cover - numba is a hard dependency here
    HAVE_NUMBA = False
    njit = _noop_jit


def _env_flag() -> bool:
    raw = os.environ.get("SCOREDISTILL_NUMBA", "1").strip().lower()
    return raw not in {"0", "false", "no", "off"}


USE_NUMBA = HAVE_NUMBA and _env_flag()


def numba_enabled() -> bool:
    return USE_NUMBA


@contextlib.contextmanager
def use_numba(enabled: bool):
    """Temporarily select the compiled (True) or numpy (False) kernels."""
    global USE_NUMBA
    previous = USE_NUMBA
    USE_NUMBA = bool(enabled) and HAVE_NUMBA
    try:
        yield
    finally:
        USE_NUMBA = previous
