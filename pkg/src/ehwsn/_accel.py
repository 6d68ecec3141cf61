"""Numba switch.

Set ``EHWSN_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when numba
is importable. The flag is read once at import time.
"""

import os

_DISABLED = os.environ.get("EHWSN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by EHWSN_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
