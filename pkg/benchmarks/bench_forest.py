"""Benchmark the boosted-stump kernels: numba-compiled loops vs pure numpy.

Run with:
    python benchmarks/bench_forest.py [--trees 500] [--depth 2] [--sizes 1000,5000,20000]

The numba path is what the package uses by default; setting
POLICYSHIFT_NO_NUMBA=1 switches every caller to the numpy path, which this
script times side by side (it imports both kernels directly, so the flag is
not needed here).
"""

import argparse
import time

import numpy as np

from policyshift import _accel


def _time(fn, *args, repeats=3):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trees", type=int, default=500)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--shrinkage", type=float, default=0.05)
    ap.add_argument("--min-leaf", type=int, default=20)
    ap.add_argument("--sizes", default="1000,5000,20000")
    ap.add_argument("--features", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    sizes = [int(s) for s in args.sizes.split(",")]

    if _accel.USE_NUMBA:
        # compile outside the timed region
        Xw = np.ascontiguousarray(rng.uniform(-1, 1, (50, args.features)))
        yw = np.ascontiguousarray(rng.normal(size=50))
        f = _accel.fit_forest(Xw, yw, 5, args.depth, args.shrinkage, 2)
        _accel.predict_forest(Xw, *f, args.shrinkage)
        label = "numba"
    else:
        label = "numba unavailable (flag set or import failed)"
    print(f"trees={args.trees} depth={args.depth} accelerated path: {label}")
    print(f"{'n':>8} {'fit numpy':>11} {'fit numba':>11} {'speedup':>8} "
          f"{'pred numpy':>11} {'pred numba':>11} {'speedup':>8}")

    for n in sizes:
        X = np.ascontiguousarray(rng.uniform(-1, 1, (n, args.features)))
        y = np.ascontiguousarray(
            np.where(X[:, 0] > 0.2, 1.0, -0.5) + 0.3 * rng.normal(size=n))
        Xq = np.ascontiguousarray(rng.uniform(-1, 1, (n, args.features)))

        t_fit_py, forest = _time(
            _accel._fit_forest_py, X, y, args.trees, args.depth,
            args.shrinkage, args.min_leaf)
        t_pred_py, pred_py = _time(
            _accel._predict_forest_py, Xq, *forest, args.shrinkage)

        if _accel.USE_NUMBA:
            t_fit_nb, forest_nb = _time(
                _accel.fit_forest, X, y, args.trees, args.depth,
                args.shrinkage, args.min_leaf)
            t_pred_nb, pred_nb = _time(
                _accel.predict_forest, Xq, *forest_nb, args.shrinkage)
            assert np.allclose(pred_py, pred_nb, atol=1e-8)
            print(f"{n:>8} {t_fit_py:>10.3f}s {t_fit_nb:>10.3f}s "
                  f"{t_fit_py / t_fit_nb:>7.1f}x {t_pred_py:>10.4f}s "
                  f"{t_pred_nb:>10.4f}s {t_pred_py / t_pred_nb:>7.1f}x")
        else:
            print(f"{n:>8} {t_fit_py:>10.3f}s {'-':>11} {'-':>8} "
                  f"{t_pred_py:>10.4f}s {'-':>11} {'-':>8}")


if __name__ == "__main__":
    main()
