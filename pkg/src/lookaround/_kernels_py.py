"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Results are identical to the compiled path: same tie rules, same
summation order for squared distances.
"""

import numpy as np

_CHUNK = 1 << 22  # max query*ref entries held in memory at once


def _sq_dist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def nn_argmin(query, ref):
    n = query.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK // max(1, ref.shape[0]))
    for s in range(0, n, step):
        d2 = _sq_dist(query[s:s + step], ref)
        j = np.argmin(d2, axis=1)  # first occurrence on ties
        idx[s:s + step] = j
        dist[s:s + step] = np.sqrt(d2[np.arange(len(j)), j])
    return idx, dist


def knn_indices(pts, k):
    n = pts.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    step = max(1, _CHUNK // max(1, n))
    cols = np.arange(n)
    for s in range(0, n, step):
        d2 = _sq_dist(pts[s:s + step], pts)
        rows = np.arange(d2.shape[0])
        d2[rows, s + rows] = np.inf
        # stable sort on distance keeps lower index first among equals
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[s:s + step] = cols[order]
    return out


def zbuffer_splat(u, v, z, width, height):
    depth = np.full((height, width), np.nan)
    src = np.full((height, width), -1, dtype=np.int64)
    idx = np.arange(len(z))
    ok = (u >= 0) & (v >= 0) & (u < width) & (v < height) & (z > 0)
    idx = idx[ok]
    if idx.size == 0:
        return depth, src
    flat = v[idx] * width + u[idx]
    # nearest wins; equal depth keeps the first source index
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    cells = flat_sorted[first]
    depth.ravel()[cells] = z[winners]
    src.ravel()[cells] = winners
    return depth, src
