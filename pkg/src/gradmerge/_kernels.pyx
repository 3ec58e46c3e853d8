# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gradient-energy and cell-reduction kernels.

Fused single-pass versions of ``_kernels_py``; no temporaries of size H*W*C.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

CENTRAL = 0
SOBEL = 1
AGG_MAX = 0
AGG_MEAN = 1


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def gradient_energy(values, int method):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1], C = f.shape[2]
    out_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t h, w, c, hm, hp, wm, wp
    cdef double dx, dy, acc
    if method != CENTRAL and method != SOBEL:
        raise ValueError(f"unknown gradient method {method!r}")
    cdef bint central = method == CENTRAL
    with nogil:
        for h in range(H):
            hm = _clamp(h - 1, H)
            hp = _clamp(h + 1, H)
            for w in range(W):
                wm = _clamp(w - 1, W)
                wp = _clamp(w + 1, W)
                acc = 0.0
                if central:
                    for c in range(C):
                        dx = f[h, wp, c] - f[h, wm, c]
                        dy = f[hp, w, c] - f[hm, w, c]
                        acc += dx * dx + dy * dy
                else:
                    for c in range(C):
                        dx = ((f[hm, wp, c] + 2.0 * f[h, wp, c] + f[hp, wp, c])
                              - (f[hm, wm, c] + 2.0 * f[h, wm, c] + f[hp, wm, c]))
                        dy = ((f[hp, wm, c] + 2.0 * f[hp, w, c] + f[hp, wp, c])
                              - (f[hm, wm, c] + 2.0 * f[hm, w, c] + f[hm, wp, c]))
                        acc += dx * dx + dy * dy
                out[h, w] = sqrt(acc)
    return out_arr


def cell_reduce(energy, cells, int agg, int sigma):
    cdef const double[::1] g = np.ascontiguousarray(energy, dtype=np.float64)
    cdef const long long[:, ::1] idx = np.ascontiguousarray(cells, dtype=np.int64)
    cdef Py_ssize_t M = idx.shape[0], k = idx.shape[1], m, j
    scores_arr = np.empty(M, dtype=np.float64)
    dst_arr = np.empty(M, dtype=np.int64)
    cdef double[::1] scores = scores_arr
    cdef long long[::1] dst = dst_arr
    cdef double v, red, best
    cdef long long besti
    if agg != AGG_MAX and agg != AGG_MEAN:
        raise ValueError(f"unknown aggregation {agg!r}")
    cdef bint use_max = agg == AGG_MAX
    with nogil:
        for m in range(M):
            v = g[idx[m, 0]]
            red = v
            best = sigma * v
            besti = idx[m, 0]
            for j in range(1, k):
                v = g[idx[m, j]]
                if use_max:
                    if v > red:
                        red = v
                else:
                    red += v
                if sigma * v > best:
                    best = sigma * v
                    besti = idx[m, j]
            if not use_max:
                red = red / k
            scores[m] = -red
            dst[m] = besti
    return scores_arr, dst_arr
