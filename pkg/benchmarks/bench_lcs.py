"""Benchmark the compiled LCS kernel against the pure-Python fallback.

Run from the repository root after installing the package:

    python benchmarks/bench_lcs.py
"""

import time

import numpy as np

from rlqfs import _lcs_py

try:
    from rlqfs import _lcsext
except ImportError:
    _lcsext = None


def bench(impl, pairs, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        acc = 0
        for a, b in pairs:
            acc += impl.lcs_len_ids(a, b)
        best = min(best, time.perf_counter() - start)
    return best, acc


def main():
    rng = np.random.default_rng(0)
    print(f"{'length':>8} {'pairs':>6} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for length, n_pairs in [(16, 400), (64, 200), (256, 40), (1024, 6)]:
        pairs = [
            (
                rng.integers(0, 50, size=length).astype(np.int64),
                rng.integers(0, 50, size=length).astype(np.int64),
            )
            for _ in range(n_pairs)
        ]
        t_py, acc_py = bench(_lcs_py, pairs)
        if _lcsext is None:
            print(f"{length:>8} {n_pairs:>6} {t_py * 1e3:>10.1f}ms {'n/a':>12} {'n/a':>8}")
            continue
        t_ext, acc_ext = bench(_lcsext, pairs)
        assert acc_py == acc_ext, "implementations disagree"
        print(
            f"{length:>8} {n_pairs:>6} {t_py * 1e3:>10.1f}ms {t_ext * 1e3:>10.1f}ms "
            f"{t_py / t_ext:>7.1f}x"
        )


if __name__ == "__main__":
    main()
