"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 200]

Prints median per-call time for each kernel and backend, the speedup, and the
largest output difference between backends on the same inputs.
"""
import argparse
import timeit

import numpy as np

from imbameta._backend import BACKENDS


def cases(rng):
    """(name, function name, args) for workloads the pipeline actually runs."""
    out = []
    for B, d in ((20, 8), (100, 8), (100, 16)):
        U, V = rng.normal(size=(B, d)), rng.normal(size=(B, d)) + 0.3
        out.append((f"mmd2_ustat B={B} d={d}", "mmd2_ustat", (U, V, 1.5)))
    for n_way, k_shot, q, e in ((5, 5, 10, 8), (5, 1, 10, 8), (20, 5, 15, 16)):
        S = rng.normal(size=(n_way * k_shot, e))
        ys = np.repeat(np.arange(n_way), k_shot)
        Q = rng.normal(size=(n_way * q, e))
        yq = np.repeat(np.arange(n_way), q)
        tag = f"{n_way}w{k_shot}s q={q} e={e}"
        out.append((f"pnet_head {tag}", "pnet_head", (S, ys, Q, yq, n_way)))
        out.append((f"pnet_predict {tag}", "pnet_predict", (S, ys, Q, n_way)))
    return out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    names = sorted(BACKENDS)
    if "cython" not in BACKENDS:
        print("compiled extension not built; timing the NumPy fallback only")
    rng = np.random.default_rng(args.seed)
    header = f"{'kernel':<34}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}{'max diff':>12}"
    print(header)
    print("-" * len(header))
    for label, fn, fargs in cases(rng):
        times, results = {}, {}
        for n in names:
            f = getattr(BACKENDS[n], fn)
            results[n] = f(*fargs)
            runs = timeit.repeat(lambda: f(*fargs), repeat=args.repeat, number=args.number)
            times[n] = 1e6 * float(np.median(runs)) / args.number
        row = f"{label:<34}" + "".join(f"{times[n]:>16.2f}" for n in names)
        if len(names) == 2:
            row += f"{times['python'] / times['cython']:>9.1f}x{max_diff(results['cython'], results['python']):>12.1e}"
        print(row)


if __name__ == "__main__":
    main()
