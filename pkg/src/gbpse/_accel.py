"""Optional numba acceleration.

Hot kernels are written twice: a numba ``@njit`` loop version and a vectorised
numpy version.  The numba path is used when numba imports cleanly and the
environment variable ``GBPSE_DISABLE_NUMBA`` is unset or ``0``.  The flag is
read on every dispatch so tests can flip it at runtime.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "GBPSE_DISABLE_NUMBA"


def numba_enabled():
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "0").strip().lower() in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or an identity decorator without numba."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("error_model", "numpy")
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda func: func
