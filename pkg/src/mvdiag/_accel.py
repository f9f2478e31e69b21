"""Numba dispatch for hot kernels.

Kernels are written once in the numba-compatible subset of Python/numpy.
``jit`` compiles them with ``numba.njit`` unless ``MVDIAG_DISABLE_NUMBA`` is
set to a truthy value (or numba is not importable), in which case the plain
Python function is used unchanged. Both paths consume identical inputs and
produce identical outputs.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("MVDIAG_DISABLE_NUMBA", "").strip().lower()

try:  # pragma: no cover - import guard
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and _FLAG not in {"1", "true", "yes", "on"}


def jit(fn):
    """Compile ``fn`` with numba when enabled; keep the Python original on ``.py_func``."""
    if not NUMBA_ENABLED:
        fn.py_func = fn
        return fn
    compiled = numba.njit(cache=True, nogil=True)(fn)
    return compiled


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
