"""Time the compiled kernels against the numpy fallback.

Usage: python bench/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from smrlnn import _backend, _fallback


def cases(rng):
    out = {}
    for n in (10, 50, 100):
        a = rng.standard_normal((n, n))
        spd = a @ a.T + n * np.eye(n)
        out[f"jacobi_eigh n={n}"] = ("jacobi_eigh", (spd,))
        out[f"cholesky n={n}"] = ("cholesky", (spd,))
    for n in (200, 2000):
        pt, pc = rng.uniform(size=n // 2), rng.uniform(size=n)
        order = np.argsort(-pt, kind="stable").astype(np.int64)
        out[f"greedy_match n_t={n // 2}"] = ("greedy_match", (pt, pc, order))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _backend.COMPILED:
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'case':26s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, (fn, arg) in cases(rng).items():
        def best(mod):
            f = getattr(mod, fn)
            t = timeit.repeat(lambda: f(*arg), number=1, repeat=args.repeat)
            return 1e3 * min(t)
        py = best(_fallback)
        if _backend.COMPILED:
            c = best(_backend.compiled)
            print(f"{label:26s} {py:10.3f} {c:12.3f} {py / c:7.1f}x")
        else:
            print(f"{label:26s} {py:10.3f} {'-':>12s} {'-':>8s}")


if __name__ == "__main__":
    main()
