"""Hot-kernel dispatch: compiled extension when available, pure Python otherwise.

Set RLQFS_NO_EXT=1 to force the fallback (used by the benchmark and tests).
"""

import os
from typing import Hashable, Sequence

import numpy as np

from rlqfs import _lcs_py

if os.environ.get("RLQFS_NO_EXT"):
    _impl = _lcs_py
    BACKEND = "python"
else:
    try:
        from rlqfs import _lcsext as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _lcs_py
        BACKEND = "python"


def lcs_len(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Length of the longest common subsequence of two token sequences.

    Tokens may be any hashable values; they are interned to int ids before
    hitting the kernel.
    """
    if len(a) == 0 or len(b) == 0:
        return 0
    ids: dict = {}
    enc_a = np.fromiter((ids.setdefault(t, len(ids)) for t in a), dtype=np.int64, count=len(a))
    enc_b = np.fromiter((ids.setdefault(t, len(ids)) for t in b), dtype=np.int64, count=len(b))
    return int(_impl.lcs_len_ids(enc_a, enc_b))
