"""Time the numba and numpy kernel backends on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20] [--sizes 64,256,1024]

Prints one line per (operation, size) with the best-of-``repeat`` time of each
backend, their ratio, and the largest absolute disagreement.
"""

import argparse
import time

import numpy as np

from cacrlab import kernels
from cacrlab.checks import random_batch
from cacrlab.losses import LossSpec, Temperatures
from cacrlab.rng import make_rng


def best_time(fn, repeat):
    fn()  # warm-up (numba compiles or loads from cache here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n, rng):
    d = 16
    A, B = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    S = rng.standard_normal((n, n)) * 5
    batch = random_batch(rng, n, 4, d)
    spec = LossSpec("cacr", Temperatures(1.0, 0.9))
    return {
        "pairwise_sq_dist": lambda: kernels.pairwise_sq_dist(A, B),
        "softmax_rows": lambda: kernels.softmax_rows(S),
        "logsumexp_rows": lambda: kernels.logsumexp_rows(S),
        "cacr_loss+grad": lambda: spec.evaluate(batch).grad_queries,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sizes", default="64,256,1024")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    sizes = [int(s) for s in args.sizes.split(",")]
    print(f"{'operation':<18}{'n':>6}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'max diff':>11}")
    previous = kernels.BACKEND
    try:
        for n in sizes:
            ops = cases(n, make_rng(0, "bench", n))
            for name, fn in ops.items():
                kernels.set_backend("numpy")
                t_np, out_np = best_time(fn, args.repeat)
                kernels.set_backend("numba")
                t_nb, out_nb = best_time(fn, args.repeat)
                diff = float(np.abs(out_np - out_nb).max())
                print(f"{name:<18}{n:>6}{1e3 * t_np:>11.3f}{1e3 * t_nb:>11.3f}{t_np / t_nb:>9.2f}{diff:>11.1e}")
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":
    main()
