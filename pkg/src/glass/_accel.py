"""Optional numba acceleration.

Set ``GLASS_NO_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("GLASS_NO_NUMBA", "0").lower() not in ("1", "true", "yes")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    def decorator(func):
        if USE_NUMBA:
            return _njit(*args, **kwargs)(func)
        return func
    return decorator


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
