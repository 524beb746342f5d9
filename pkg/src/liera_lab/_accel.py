"""Optional numba acceleration.

Set ``LIERA_LAB_NUMBA=0`` to force the pure-numpy kernels.  Both paths use the
same accumulation order, so results are bit-identical.
"""
import os

try:
    from numba import njit

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and os.environ.get("LIERA_LAB_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise."""

    def decorator(func):
        if NUMBA_INSTALLED:
            return njit(*args, **kwargs)(func)
        return func

    return decorator
