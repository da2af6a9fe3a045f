"""Hot numeric kernels with two interchangeable implementations.

``HDPRIOR_BACKEND=numba`` (the default when numba imports) selects the
``@njit`` loops in :mod:`.numba_impl`; ``HDPRIOR_BACKEND=numpy`` selects the
vectorised fallback in :mod:`.numpy_impl`. All kernels take and return
float64 arrays; callers cast to float32 for storage.

Both paths are deterministic run to run. They are not bitwise identical to
each other because they sum in different orders.
"""

import logging
import os

from . import numpy_impl

logger = logging.getLogger(__name__)

_requested = os.environ.get("HDPRIOR_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"HDPRIOR_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = numpy_impl
if _requested == "numba":
    try:
        from . import numba_impl as _impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba unavailable, falling back to numpy kernels")
        _impl = numpy_impl

BACKEND = _impl.NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
min_filter2d = _impl.min_filter2d
sqdist = _impl.sqdist


def get(name):
    """Return the kernel module for ``name`` ('numba' or 'numpy')."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl
        return numba_impl
    raise ValueError(f"unknown backend {name!r}")
