# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY, NAN

cnp.import_array()


def nn_argmin(const double[:, ::1] query, const double[:, ::1] ref):
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, best_j
    cdef double qx, qy, qz, dx, dy, dz, d2, best
    with nogil:
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            best = INFINITY
            best_j = 0
            for j in range(m):
                dx = qx - ref[j, 0]
                dy = qy - ref[j, 1]
                dz = qz - ref[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best:
                    best = d2
                    best_j = j
            idx[i] = best_j
            dist[i] = sqrt(best)
    return idx_arr, dist_arr


def knn_indices(const double[:, ::1] pts, int k):
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    bd_arr = np.empty(k, dtype=np.float64)
    bi_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = bd_arr
    cdef long long[::1] bi = bi_arr
    cdef Py_ssize_t i, j, s, filled
    cdef double dx, dy, dz, d2
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                dx = pts[i, 0] - pts[j, 0]
                dy = pts[i, 1] - pts[j, 1]
                dz = pts[i, 2] - pts[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if filled < k:
                    s = filled
                    filled += 1
                elif d2 < bd[k - 1]:
                    s = k - 1
                else:
                    continue
                # insertion keeps (distance, index) order; equal distances keep lower index first
                while s > 0 and bd[s - 1] > d2:
                    bd[s] = bd[s - 1]
                    bi[s] = bi[s - 1]
                    s -= 1
                bd[s] = d2
                bi[s] = j
            for s in range(k):
                out[i, s] = bi[s]
    return out_arr


def zbuffer_splat(const long long[::1] u, const long long[::1] v,
                  const double[::1] z, int width, int height):
    depth_arr = np.full((height, width), np.nan)
    src_arr = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, ::1] depth = depth_arr
    cdef long long[:, ::1] src = src_arr
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t i
    cdef long long uu, vv
    with nogil:
        for i in range(n):
            uu = u[i]
            vv = v[i]
            if uu < 0 or vv < 0 or uu >= width or vv >= height:
                continue
            if not (z[i] > 0.0):
                continue
            if src[vv, uu] < 0 or z[i] < depth[vv, uu]:
                depth[vv, uu] = z[i]
                src[vv, uu] = i
    return depth_arr, src_arr
