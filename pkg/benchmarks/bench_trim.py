"""Time the compiled trimming kernels against the numpy fallback.

    python benchmarks/bench_trim.py [--depth 20000] [--length 256] [--repeats 5]

Both backends run on the same random pool and their outputs are checked for
equality before timing.
"""
import argparse
import time

import numpy as np

from evogen import _pykernels
from evogen.msa_io import GAP_ID

try:
    from evogen import _ckernels
except ImportError:
    _ckernels = None


def make_pool(depth, length, seed=0):
    rng = np.random.default_rng(seed)
    query = rng.integers(0, 20, length)
    tok = np.repeat(query[None, :], depth, axis=0)
    # per-row mutation rate spread so greedy admission has real work to do
    rates = rng.uniform(0.05, 0.6, depth)[:, None]
    mut = rng.random((depth, length)) < rates
    tok[mut] = rng.integers(0, 21, mut.sum())
    gaps = rng.random((depth, length)) < 0.1
    tok[gaps] = GAP_ID
    tok[0] = query
    return np.ascontiguousarray(tok, dtype=np.int8)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=20000)
    ap.add_argument("--length", type=int, default=256)
    ap.add_argument("--n-max", type=int, default=512)
    ap.add_argument("--ident-max", type=float, default=0.9)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    tok = make_pool(args.depth, args.length)
    ref = np.ascontiguousarray(tok[0])
    order = np.arange(1, args.depth, dtype=np.int64)
    cases = {
        "identity_to": lambda m: m.identity_to(tok, ref, GAP_ID),
        "coverage_rows": lambda m: m.coverage_rows(tok, GAP_ID),
        "hamming_to": lambda m: m.hamming_to(tok, ref),
        "greedy_admit": lambda m: m.greedy_admit(tok, order, args.n_max, args.ident_max, GAP_ID),
    }
    print(f"pool {args.depth} x {args.length}, n_max {args.n_max}, best of {args.repeats}")
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<14} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, call in cases.items():
        tp = best_of(lambda: call(_pykernels), args.repeats)
        if _ckernels is None:
            print(f"{name:<14} {tp * 1e3:10.2f}")
            continue
        if not np.array_equal(call(_pykernels), call(_ckernels)):
            raise SystemExit(f"{name}: backends disagree")
        tc = best_of(lambda: call(_ckernels), args.repeats)
        print(f"{name:<14} {tp * 1e3:10.2f} {tc * 1e3:10.2f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
