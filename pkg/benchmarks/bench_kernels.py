"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--dtype float32|float64]

Prints one row per kernel: best-of-N time for each backend, the speedup,
and the largest absolute difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from lpt.kernels import backend_module


def cases(rng, dtype):
    a = rng.normal(size=(256, 64)).astype(dtype)
    b = rng.normal(size=(64, 64)).astype(dtype)
    x = rng.normal(size=(32, 8, 16, 16)).astype(dtype)
    w = rng.normal(size=(8, 8, 3, 3)).astype(dtype)
    g = rng.normal(size=(32, 8, 16, 16)).astype(dtype)
    return {
        "matmul 256x64 @ 64x64": ("matmul", (a, b)),
        "sum_rows 256x64": ("sum_rows", (a,)),
        "conv3x3 32x8x16x16": ("conv3x3", (x, w)),
        "conv3x3_grad_input": ("conv3x3_grad_input", (g, w)),
        "conv3x3_grad_weight": ("conv3x3_grad_weight", (x, g)),
        "avgpool3x3": ("avgpool3x3", (x,)),
        "avgpool3x3_grad": ("avgpool3x3_grad", (g,)),
    }


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    args = parser.parse_args(argv)
    py = backend_module("python")
    try:
        cy = backend_module("compiled")
    except ImportError:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'compiled ms':>12s} {'python ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, (name, inputs) in cases(rng, np.dtype(args.dtype)).items():
        tc = best_time(getattr(cy, name), inputs, args.repeat)
        tp = best_time(getattr(py, name), inputs, args.repeat)
        diff = np.max(np.abs(np.asarray(getattr(cy, name)(*inputs)) - getattr(py, name)(*inputs)))
        print(f"{label:28s} {tc * 1e3:12.3f} {tp * 1e3:10.3f} {tp / tc:8.2f} {diff:11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
