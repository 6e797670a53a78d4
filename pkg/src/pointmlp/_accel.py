"""Backend selection for the hot kernels.

``POINTMLP_BACKEND=numpy`` forces the pure-numpy kernels even when numba
is installed. Both paths stay importable so the benchmark can compare them.
"""

import os
import warnings

BACKEND_ENV = "POINTMLP_BACKEND"
THREADS_ENV = "POINTMLP_THREADS"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested_backend():
    choice = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {choice!r}")
    return choice


USE_NUMBA = HAVE_NUMBA and _requested_backend() == "numba"


def set_threads(n):
    """Cap numba's worker pool at ``n`` threads (no-op without numba)."""
    if HAVE_NUMBA:
        with warnings.catch_warnings():
            # threading-layer probing may warn about an old TBB; another layer is used instead
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


if os.environ.get(THREADS_ENV):
    set_threads(os.environ[THREADS_ENV])


def njit(fn=None, **kwargs):
    """``numba.njit(cache=True)`` or, without numba, the plain Python function."""
    if not HAVE_NUMBA:
        return fn if fn is not None else (lambda f: f)
    kwargs.setdefault("cache", True)
    if fn is None:
        return numba.njit(**kwargs)
    return numba.njit(**kwargs)(fn)


def default_backend():
    return "numba" if USE_NUMBA else "numpy"


def resolve_backend(backend):
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
