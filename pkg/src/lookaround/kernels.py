"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; ``LOOKAROUND_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("LOOKAROUND_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _points(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {a.shape}")
    return a


def nn_argmin(query, ref, impl=None):
    """Nearest neighbour in ``ref`` for every row of ``query``.

    Returns ``(index, distance)``. Ties resolve to the lowest ref index.
    """
    query, ref = _points(query), _points(ref)
    if ref.shape[0] == 0:
        raise ValueError("reference set is empty")
    return (impl or _impl).nn_argmin(query, ref)


def knn_indices(points, k, impl=None):
    """Indices of the ``k`` nearest other points for each point, closest first."""
    points = _points(points)
    if not 0 < k < points.shape[0]:
        raise ValueError(f"need 0 < k < {points.shape[0]}, got k={k}")
    return (impl or _impl).knn_indices(points, int(k))


def zbuffer_splat(u, v, z, width, height, impl=None):
    """Splat depths onto a (height, width) grid; the nearest sample wins.

    Returns ``(depth, source_index)`` with NaN / -1 for untouched cells.
    """
    u = np.ascontiguousarray(u, dtype=np.int64)
    v = np.ascontiguousarray(v, dtype=np.int64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    return (impl or _impl).zbuffer_splat(u, v, z, int(width), int(height))
