"""Compiled-kernel benchmark: Cython extension vs numpy fallback.

Times the two hot inner kernels, the surrogate forward pass and the
Cholesky quadratic form, at the replica's shapes.  Run as

    python3 benchmarks/bench_kernels.py [--repeats N]

The fallback is loaded directly from the backend module, so the
comparison works in one process regardless of DARCYDA_PURE_PYTHON.
"""

import argparse
import time

import numpy as np

from darcyda._core import (
    ACT_EXPONENTIAL,
    ACT_RELU,
    ACT_SIGMOID,
    HAVE_COMPILED_KERNELS,
    _kernels_py,
)
from darcyda._core import _impl as active
from darcyda.surrogate import SurrogateNet, design_spec


def timed(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(200):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / 200)
    return best


def bench_nn_forward(repeats):
    net = SurrogateNet.initialize(design_spec(32, 25), np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal(32)
    acts = np.array([ACT_SIGMOID, ACT_RELU, ACT_RELU, ACT_EXPONENTIAL],
                    dtype=np.int32)
    args = (x, net.weights, net.biases, acts)
    return (timed(_kernels_py.nn_forward, args, repeats),
            timed(active.nn_forward, args, repeats))


def bench_chol_quadform(repeats):
    rng = np.random.default_rng(3)
    a = rng.standard_normal((25, 25))
    chol = np.linalg.cholesky(a @ a.T + 25 * np.eye(25))
    r = np.ascontiguousarray(rng.standard_normal(25))
    args = (chol, r)
    return (timed(_kernels_py.chol_quadform, args, repeats),
            timed(active.chol_quadform, args, repeats))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions, best-of (default 7)")
    args = parser.parse_args()

    print("compiled extension available: %s" % HAVE_COMPILED_KERNELS)
    print("active backend: %s" % active.__name__)
    print()
    print("%-16s %12s %12s %8s" % ("kernel", "numpy (us)", "active (us)", "speedup"))
    for name, fn in (("nn_forward", bench_nn_forward),
                     ("chol_quadform", bench_chol_quadform)):
        py_t, active_t = fn(args.repeats)
        print("%-16s %12.2f %12.2f %7.2fx"
              % (name, 1e6 * py_t, 1e6 * active_t, py_t / active_t))


if __name__ == "__main__":
    main()
