"""Compare the numba and numpy kernel paths.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --round    # plus one federated round per backend

Prints best-of-N microseconds per call and the speed-up of numba over numpy.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedcfa import _kernels as K

SHAPES = {
    "softmax_xent": [(32, 2), (32, 10), (128, 10), (1024, 10)],
    "fdc": [(32, 16), (32, 64), (128, 64), (128, 256)],
}


def inputs(name, shape, rng):
    n, d = shape
    if name == "softmax_xent":
        return rng.normal(size=shape), rng.dirichlet(np.ones(d), size=n)
    return (rng.normal(size=shape),)


def best_us(fn, args, repeat=7):
    number = max(1, int(2000 / (1 + args[0].size / 256)))
    times = timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)
    return min(times) / number * 1e6


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"{'kernel':14s} {'shape':>11s} {'numpy us':>10s} {'numba us':>10s} {'speed-up':>9s}")
    for name, shapes in SHAPES.items():
        np_fn, nb_fn = getattr(K, name + "_numpy"), getattr(K, name + "_numba")
        for shape in shapes:
            args = inputs(name, shape, rng)
            nb_fn(*args)  # compile outside the timing
            t_np, t_nb = best_us(np_fn, args), best_us(nb_fn, args)
            print(f"{name:14s} {str(shape):>11s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.2f}x")


ROUND_SNIPPET = """
import time
from fedcfa.config import ExperimentConfig
from fedcfa.experiments import run, build_data
cfg = ExperimentConfig(partition="simpson", rounds=3, lr=0.05)
data = build_data(cfg)
run(cfg.replace(rounds=1), data=data)  # warm-up and JIT
t = time.perf_counter(); run(cfg, data=data); dt = time.perf_counter() - t
print(f"{dt / cfg.rounds * 1000:.1f}")
"""


def bench_round():
    print("\nfedcfa round on the desk Simpson data (ms/round)")
    for flag in ("0", "1"):
        env = dict(os.environ, FEDCFA_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", ROUND_SNIPPET], env=env, capture_output=True, text=True, check=True)
        print(f"  {'numba' if flag == '1' else 'numpy':6s} {out.stdout.strip()}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--round", action="store_true", help="also time a full federated round per backend")
    opts = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels()
    if opts.round:
        bench_round()
