"""Compiled loop kernel versus the numpy fallback.

    python benchmarks/bench_kernel.py [--batch 200] [--length 1024] [--nodes 600] [--repeat 3]

Prints bursts per second for each backend, the speedup, and the largest
state difference between the two.
"""
import argparse
import time

import numpy as np

from dlr import reservoir
from dlr.reservoir import ReservoirConfig, run_batch


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--nodes", type=int, default=600)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    S = rng.uniform(0, 0.1, size=(args.batch, args.length))
    cfg = ReservoirConfig(N=args.nodes, eta=0.995, nu=1.0, h=(0.5, 0.5), mask_kind="uniform", sigma=args.sigma)
    print(f"batch={args.batch} length={args.length} N={args.nodes} sigma={args.sigma} threads={args.threads}")
    results = {}
    backends = ["numpy"] + (["compiled"] if reservoir.BACKEND == "compiled" else [])
    for name in backends:
        t, X = best_time(lambda: run_batch(S, cfg, threads=args.threads, backend=name), args.repeat)
        results[name] = (t, X)
        print(f"{name:9s} {t:8.3f} s  {args.batch / t:10.1f} bursts/s")
    if len(results) == 2:
        (tn, Xn), (tc, Xc) = results["numpy"], results["compiled"]
        print(f"speedup   {tn / tc:8.1f}x  max|dX| {np.abs(Xn - Xc).max():.1e}")
    else:
        print("compiled kernel not built; only the fallback was timed")


if __name__ == "__main__":
    main()
