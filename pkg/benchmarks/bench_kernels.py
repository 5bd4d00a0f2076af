"""Compare the compiled and numpy kernel backends on representative shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from aofp.tensor import kernels


def cases(rng):
    x = rng.standard_normal((64, 18, 18, 32)).astype(np.float32)
    cols = rng.standard_normal((64, 16, 16, 3, 3, 32)).astype(np.float32)
    fm = rng.standard_normal((64, 16, 16, 32)).astype(np.float32)
    _, arg = kernels.maxpool_forward(fm, 2, 2)
    g = rng.standard_normal((64, 8, 8, 32)).astype(np.float32)
    a = rng.standard_normal((64, 8, 8, 64)).astype(np.float32)
    b = a * (rng.random(a.shape) > 0.5).astype(np.float32)
    return {
        "im2col 64x18x18x32 k3": lambda: kernels.im2col(x, 3, 3, 1),
        "col2im 64x16x16 k3 c32": lambda: kernels.col2im(cols, 18, 18, 1),
        "maxpool fwd 64x16x16x32": lambda: kernels.maxpool_forward(fm, 2, 2),
        "maxpool bwd 64x16x16x32": lambda: kernels.maxpool_backward(g, arg, 16, 16, 2, 2),
        "sq_dist_ratio 64x8x8x64": lambda: kernels.sq_dist_ratio(a, b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    results = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()
            results[(label, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    kernels.use_backend(backends[-1])
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label in cases(np.random.default_rng(0)):
        py = results[(label, "python")] * 1e3
        if "cython" in backends:
            cy = results[(label, "cython")] * 1e3
            print(f"{label:28s} {py:10.3f} {cy:10.3f} {py / cy:8.2f}x")
        else:
            print(f"{label:28s} {py:10.3f} {'n/a':>10s}")


if __name__ == "__main__":
    main()
