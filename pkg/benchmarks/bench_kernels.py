"""Compare the compiled and numpy flow kernels.

Run ``python3 benchmarks/bench_kernels.py``.  Prints milliseconds per call
for the forward pass, the objective gradient and spectral normalisation at
a few representative sizes, plus the largest disagreement between backends.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from ima_bss.flow import available_backends, get_kernels
from ima_bss.flow._reference import block_size, layer_shapes

SIZES = [
    # (n, hidden, sub-layers, blocks, batch)
    (2, 16, 2, 8, 256),
    (2, 16, 2, 32, 512),
    (5, 40, 2, 8, 256),
    (3, 24, 3, 8, 256),
]


def _timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def bench(repeat: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    backends = available_backends()
    rows = []
    for n, h, l, K, B in SIZES:
        theta = rng.normal(size=K * block_size(n, h, l)) * 0.2
        shift, scale = np.zeros(n), np.ones(n)
        X = rng.normal(size=(B, n))
        cols = sum(c for _, c in layer_shapes(n, h, l))
        vecs = rng.normal(size=K * cols)
        results = {}
        for name in backends:
            k = get_kernels(name)
            results[name] = {
                "forward": _timeit(lambda: k.forward(theta, shift, scale, X, n, h, l, K, True), repeat),
                "objective_grad": _timeit(
                    lambda: k.objective_grad(theta, shift, scale, X, n, h, l, K, 0.5, 1), repeat
                ),
                "spectral_normalize": _timeit(
                    lambda: k.spectral_normalize(theta.copy(), vecs.copy(), n, h, l, K, 0.97, 5), repeat
                ),
            }
        diff = 0.0
        if len(backends) == 2:
            a = get_kernels("python").objective_grad(theta, shift, scale, X, n, h, l, K, 0.5, 1)[3]
            b = get_kernels("cython").objective_grad(theta, shift, scale, X, n, h, l, K, 0.5, 1)[3]
            diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        rows.append(((n, h, l, K, B), results, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    print(f"{'n':>2} {'h':>3} {'l':>2} {'K':>3} {'B':>4}  {'op':<19} " + " ".join(f"{b:>10}" for b in available_backends()) + "   speedup")
    for (n, h, l, K, B), res, diff in rows:
        for op in ("forward", "objective_grad", "spectral_normalize"):
            times = [res[b][op] for b in available_backends()]
            speed = f"{times[0] / times[1]:8.1f}x" if len(times) == 2 else ""
            print(f"{n:>2} {h:>3} {l:>2} {K:>3} {B:>4}  {op:<19} " + " ".join(f"{t:9.3f}ms" for t in times) + f" {speed}")
        print(f"{'':>17}  max |grad difference| = {diff:.2e}")


if __name__ == "__main__":
    main()
