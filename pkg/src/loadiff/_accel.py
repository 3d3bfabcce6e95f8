"""Optional numba acceleration.

Set ``LOADIFF_NUMBA=0`` in the environment to force the pure-numpy kernels.
When numba is not importable the numpy path is used silently.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def numba_requested():
    flag = os.environ.get("LOADIFF_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True`` when numba is available, else identity."""
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if not HAS_NUMBA:
            return fn
        return numba.njit(**kwargs)(fn)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap
