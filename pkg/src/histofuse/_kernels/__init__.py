"""Hot-kernel backend selection.

Set HISTOFUSE_BACKEND=numpy to force the pure-numpy implementations,
HISTOFUSE_BACKEND=numba to require the compiled ones (ImportError if numba
is missing). Default "auto" uses numba when available. The chosen backend
name is exported as BACKEND; benchmarks/bench_kernels.py compares both.
"""

from __future__ import annotations

import os

_KERNEL_NAMES = (
    "dijkstra_csr",
    "central_gradient",
    "sep_convolve2d",
    "local_maxima",
    "haar_level_fwd",
    "haar_level_inv",
)


def load_backend(name: str):
    """Import and return a backend module by name ("numpy" or "numba")."""
    if name == "numpy":
        from . import numpy_impl
        return numpy_impl
    if name == "numba":
        from . import numba_impl
        return numba_impl
    raise ValueError(f"unknown kernel backend {name!r}")


_requested = os.environ.get("HISTOFUSE_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"HISTOFUSE_BACKEND must be auto, numba or numpy, got {_requested!r}"
    )

if _requested == "numpy":
    _impl = load_backend("numpy")
    BACKEND = "numpy"
else:
    try:
        _impl = load_backend("numba")
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = load_backend("numpy")
        BACKEND = "numpy"

dijkstra_csr = _impl.dijkstra_csr
central_gradient = _impl.central_gradient
sep_convolve2d = _impl.sep_convolve2d
local_maxima = _impl.local_maxima
haar_level_fwd = _impl.haar_level_fwd
haar_level_inv = _impl.haar_level_inv


def warmup() -> None:
    """Trigger JIT compilation (no-op on the numpy backend)."""
    import numpy as np

    indptr = np.array([0, 1, 2], dtype=np.int64)
    indices = np.array([1, 0], dtype=np.int64)
    weights = np.array([1.0, 1.0])
    dijkstra_csr(indptr, indices, weights, 0)
    img = np.zeros((4, 4))
    central_gradient(img)
    sep_convolve2d(img, np.array([0.25, 0.5, 0.25]))
    local_maxima(img, 0.0, 1)
    haar_level_inv(haar_level_fwd(img))


__all__ = ["BACKEND", "load_backend", "warmup", *_KERNEL_NAMES]
