"""Time the compiled core against the pure-Python fallback.

    python benchmarks/bench_backends.py [--m 1000] [--repeat 3]

Each kernel is run on identical inputs by both backends; the table reports
the best wall time of ``--repeat`` runs and the speed-up.
"""

import argparse
import math
import time

import numpy as np

from infinet import _fallback
from infinet.learn import objectives

try:
    from infinet import _core
except ImportError:
    _core = None


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(m, d=50, k=10, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    dots = np.ascontiguousarray(x @ x.T)
    sq = np.einsum("ij,ij->i", x, x)
    y = (np.arange(m) % k).astype(np.int64)
    G, _ = _fallback.analytic_kernel_matrix(dots, sq, sq, 0, 1, 0.0, True, 1e-6)
    G = np.ascontiguousarray(G)
    lam = 1e-3
    la0 = np.full((m, k), -math.log(k))
    _, _, _, S0 = objectives(G, y, la0, lam)
    order = np.arange(m, dtype=np.int64)

    def kernel(mod, depth):
        return lambda: mod.analytic_kernel_matrix(dots, sq, sq, 0, depth, 1.0, True, 1e-6)

    def eg(mod, inner):
        def run():
            mod.eg_epoch(G, y, la0.copy(), np.ascontiguousarray(S0.copy()), np.ones(m), lam, False,
                         np.zeros(m, dtype=np.uint8), order, inner)
        return run

    def pa(mod):
        return lambda: mod.pa_pass(G, y, np.zeros((m, k)), np.zeros((m, k)), order)

    return [
        ("analytic_kernel_matrix depth 1", lambda mod: kernel(mod, 1)),
        ("analytic_kernel_matrix depth 2", lambda mod: kernel(mod, 2)),
        ("eg_epoch inner=1", lambda mod: eg(mod, 1)),
        ("eg_epoch inner=20", lambda mod: eg(mod, 20)),
        ("pa_pass", pa),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=1000, help="number of points")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        print("compiled core not built; only the fallback is available")
    print(f"m = {args.m}")
    print(f"{'operation':34s} {'python (s)':>11s} {'cython (s)':>11s} {'speed-up':>9s}")
    for name, make in cases(args.m):
        t_py = best_time(make(_fallback), args.repeat)
        if _core is None:
            print(f"{name:34s} {t_py:11.4f} {'-':>11s} {'-':>9s}")
            continue
        t_c = best_time(make(_core), args.repeat)
        print(f"{name:34s} {t_py:11.4f} {t_c:11.4f} {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
