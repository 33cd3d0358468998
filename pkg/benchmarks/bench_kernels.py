"""Time the compiled kernels against the numpy fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Both backends
are called through the public wrappers so argument handling is included.
"""

import argparse
import timeit

import numpy as np

from lookaround import _kernels_py, kernels


def _cases(rng):
    cloud = rng.standard_normal((4096, 3))
    query = rng.standard_normal((1024, 3))
    small = rng.standard_normal((1024, 3))
    n = 32 * 32 * 4
    u = rng.integers(0, 64, n)
    v = rng.integers(0, 64, n)
    z = rng.uniform(1, 10, n)
    return {
        "nn_argmin 1024x4096": lambda impl: kernels.nn_argmin(query, cloud, impl=impl),
        "knn_indices 1024, k=8": lambda impl: kernels.knn_indices(small, 8, impl=impl),
        "zbuffer_splat 4096 -> 64x64": lambda impl: kernels.zbuffer_splat(u, v, z, 64, 64, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions (best is reported)")
    args = ap.parse_args()
    try:
        from lookaround import _kernels as compiled
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'python (ms)':>14}{'cython (ms)':>14}{'speed-up':>10}")
    for name, fn in _cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<30}{t_py:>14.2f}{'-':>14}{'-':>10}")
            continue
        a, b = fn(_kernels_py), fn(compiled)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        t_cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<30}{t_py:>14.2f}{t_cy:>14.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
