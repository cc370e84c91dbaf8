"""Compiled vs pure-Python kernel timings on the default SBM benchmark.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also checks that both backends return bit-identical results.
"""
import argparse
import timeit

import numpy as np

from satgnn import _pure
from satgnn.graph import normalize
from satgnn.sbm import SbmSpec, generate

try:
    from satgnn import _kernels
except ImportError:
    _kernels = None


def cases(n, hidden, seed):
    g = generate(SbmSpec(n=n, seed=seed))
    P = normalize(g)
    H = np.random.default_rng(seed).standard_normal((n, hidden))
    enc = _pure.polyline_encode_rows(H, 4)
    buf = np.frombuffer(enc[0], dtype=np.uint8)
    return {
        "csr_matmul": lambda k: k.csr_matmul(P.indptr, P.indices, P.data, H, n),
        "polyline_encode_rows": lambda k: k.polyline_encode_rows(H, 4),
        "polyline_decode_rows": lambda k: k.polyline_decode_rows(buf, enc[1], hidden, 4),
    }


def same(a, b):
    if isinstance(a, tuple):
        return a[0] == b[0] and np.array_equal(a[1], b[1])
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the pure backend is available")
    print(f"{'kernel':<24}{'pure ms':>12}{'compiled ms':>14}{'speedup':>10}  identical")
    for name, call in cases(args.n, args.hidden, args.seed).items():
        tp = min(timeit.repeat(lambda: call(_pure), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<24}{tp:>12.2f}{'-':>14}{'-':>10}  -")
            continue
        tc = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=args.repeat)) * 1e3
        ok = same(call(_pure), call(_kernels))
        print(f"{name:<24}{tp:>12.2f}{tc:>14.2f}{tp / tc:>9.1f}x  {ok}")


if __name__ == "__main__":
    main()
