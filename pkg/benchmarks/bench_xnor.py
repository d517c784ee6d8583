"""Compare the compiled XNOR kernel, the numpy fallback and dense float conv.

    python3 benchmarks/bench_xnor.py [--repeat 5] [--quick]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from instabnn.bitops import available_backends, pack, xnor_popcount_conv2d
from instabnn.tensor_core import dense_conv2d

CASES = [
    # (N, C, H, W, O, k, stride, padding)
    (1, 64, 56, 56, 64, 3, 1, 1),
    (1, 128, 28, 28, 128, 3, 1, 1),
    (1, 256, 14, 14, 256, 3, 1, 1),
    (8, 64, 16, 16, 64, 3, 2, 1),
]
QUICK = [(1, 32, 16, 16, 32, 3, 1, 1), (2, 16, 8, 8, 16, 3, 2, 1)]


def _time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(cases, repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for n, c, h, w, o, k, s, p in cases:
        a = np.where(rng.random((n, c, h, w)) < 0.5, -1.0, 1.0).astype(np.float32)
        wt = np.where(rng.random((o, c, k, k)) < 0.5, -1.0, 1.0).astype(np.float32)
        pa, pw = pack(a), pack(wt)
        row = {"case": f"{n}x{c}x{h}x{w} -> {o}, k{k} s{s} p{p}"}
        row["dense"] = _time(lambda: dense_conv2d(a, wt, stride=s, padding=p), repeat)
        ref = dense_conv2d(a, wt, stride=s, padding=p)
        for backend in available_backends():
            out = xnor_popcount_conv2d(pa, pw, stride=s, padding=p, backend=backend)
            if not np.array_equal(out, ref):
                raise AssertionError(f"{backend} disagrees with dense conv on {row['case']}")
            row[backend] = _time(lambda: xnor_popcount_conv2d(pa, pw, stride=s, padding=p,
                                                              backend=backend), repeat)
        rows.append(row)
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)
    rows = run(QUICK if args.quick else CASES, args.repeat)
    backends = available_backends()
    print(f"{'case':<34}{'dense ms':>10}" + "".join(f"{b + ' ms':>12}" for b in backends))
    for r in rows:
        print(f"{r['case']:<34}{r['dense'] * 1e3:>10.2f}" + "".join(f"{r[b] * 1e3:>12.2f}" for b in backends))
    if "cython" in backends:
        speed = np.mean([r["python"] / r["cython"] for r in rows])
        print(f"mean speedup cython over numpy fallback: {speed:.1f}x")


if __name__ == "__main__":
    main()
