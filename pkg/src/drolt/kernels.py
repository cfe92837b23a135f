"""Backend selection for the hot loss and distance kernels.

The compiled extension is used when it imports cleanly; set
``DROLT_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from drolt import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("DROLT_PURE_PYTHON"):
    try:
        from drolt import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

pairwise_distances = _impl.pairwise_distances
margin_loss = _impl.margin_loss
nearest_centroid = _impl.nearest_centroid


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from drolt import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
