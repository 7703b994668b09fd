"""Numba switch.

Hot kernels are compiled with numba when it is importable, unless the
``BAYESFED_DISABLE_NUMBA`` environment variable is set to a truthy value,
in which case the pure-numpy implementations in :mod:`bayesfed.kernels`
are used instead. The flag is read once at import time.
"""

import os

DISABLE_ENV = "BAYESFED_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_disabled_by_env() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not numba_disabled_by_env()


def njit(func):
    """Compile ``func`` in nopython mode; identity when numba is missing."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
