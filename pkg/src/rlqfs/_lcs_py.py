"""Pure-Python fallback for the LCS kernel."""

import numpy as np


def lcs_len_ids(a, b) -> int:
    """LCS length of two 1-D int64 arrays via rolling-row DP."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return 0
    al = a.tolist()
    bl = b.tolist()
    prev = [0] * (m + 1)
    cur = [0] * (m + 1)
    for i in range(n):
        ai = al[i]
        for j in range(m):
            if ai == bl[j]:
                cur[j + 1] = prev[j] + 1
            else:
                up = prev[j + 1]
                left = cur[j]
                cur[j + 1] = up if up >= left else left
        prev, cur = cur, prev
    return prev[m]
