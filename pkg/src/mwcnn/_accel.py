"""Backend selection for the hot numeric kernels.

The kernels in :mod:`mwcnn.kernels` exist twice: a numba ``@njit`` version
and a plain numpy version.  Which one is used is decided by the
``MWCNN_BACKEND`` environment variable (``numba`` or ``numpy``), read once at
import time.  When numba cannot be imported the numpy path is used silently.
"""

import os

try:
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator

    prange = range

BACKENDS = ("numba", "numpy")


def _initial_backend():
    name = os.environ.get("MWCNN_BACKEND", "numba").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"MWCNN_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return name


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Switch backend at runtime (used by the benchmark and the test suite)."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _backend = name


def use_numba():
    return _backend == "numba"
