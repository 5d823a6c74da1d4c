"""Numba switch.

Set ``FSL_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import os

_FLAG = os.environ.get("FSL_DISABLE_NUMBA", "").strip().lower()

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` with numba if available, else return it untouched."""
    if not HAS_NUMBA:
        return fn
    return _njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
