# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel for longest-common-subsequence length.

Same contract as rlqfs._lcs_py.lcs_len_ids; selected by rlqfs.kernels at
import time when the build produced this module.
"""

import numpy as np


def lcs_len_ids(a, b):
    """LCS length of two 1-D int64 arrays via rolling-row DP."""
    cdef long long[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef long long[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = av.shape[0]
    cdef Py_ssize_t m = bv.shape[0]
    if n == 0 or m == 0:
        return 0
    cdef long long[::1] prev = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef long long ai, up, left, diag
    for i in range(n):
        ai = av[i]
        for j in range(m):
            if ai == bv[j]:
                cur[j + 1] = prev[j] + 1
            else:
                up = prev[j + 1]
                left = cur[j]
                cur[j + 1] = up if up >= left else left
        prev, cur = cur, prev
    return int(prev[m])
