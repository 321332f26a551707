# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled exhaustive nearest-row scan (squared Euclidean, float64).

Same arithmetic as the pure-numpy fallback: full 64-bit accumulation,
argmin with lowest-index tie-break. The early abandon is exact because a
partial sum of squares can only grow.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_rows(cnp.float64_t[:, ::1] queries, cnp.float64_t[:, ::1] pool):
    """For each query row, index of the closest pool row (ties: lowest)."""
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t nr = pool.shape[0]
    cdef Py_ssize_t dim = queries.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(nq, dtype=np.int64)
    cdef cnp.int64_t[::1] out_v = out
    cdef Py_ssize_t q, r, c
    cdef double best, acc, diff

    for q in range(nq):
        best = np.inf
        out_v[q] = 0
        for r in range(nr):
            acc = 0.0
            for c in range(dim):
                diff = queries[q, c] - pool[r, c]
                acc += diff * diff
                if acc >= best:
                    break
            if acc < best:
                best = acc
                out_v[q] = r
    return out
