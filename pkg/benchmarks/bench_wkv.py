"""Compiled vs pure-Python WKV scan, with the quadratic kernel as a baseline.

    python3 benchmarks/bench_wkv.py [--T 256,1024,4096] [--cv 8] [--out bench.json]

Prints the best-of-repeats time per call and the T_max/T_min scaling ratio per kernel.
A linear kernel should scale by about T_max/T_min and the naive one by its square.
"""
import argparse
import json

from efficientiml.complexity import bench_ratios, bench_wkv, format_bench
from efficientiml.wkv import available_backends


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", default="256,1024,4096")
    ap.add_argument("--cv", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip-naive", action="store_true")
    ap.add_argument("--out")
    args = ap.parse_args()

    T_list = [int(t) for t in args.T.split(",")]
    impls = [f"scan:{b}" for b in available_backends()]
    if not args.skip_naive:
        impls.insert(0, "naive")
    rows = bench_wkv(T_list, args.cv, args.repeats, impls=tuple(impls), threads=args.threads)
    print(f"backends: {', '.join(available_backends())}; C_v={args.cv}; threads={args.threads}")
    print(format_bench(rows))
    lo, hi = min(T_list), max(T_list)
    ratios = bench_ratios(rows, lo, hi)
    for impl, r in ratios.items():
        print(f"T={hi}/T={lo} time ratio  {impl:<14} {r:6.2f}")
    by = {(r.impl, r.T): r.seconds for r in rows}
    if "scan:compiled" in impls and "scan:numpy" in impls:
        for T in T_list:
            print(f"T={T:<6} compiled speedup over numpy fallback: {by[('scan:numpy', T)] / by[('scan:compiled', T)]:.1f}x")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": [vars(r) for r in rows], "ratios": ratios}, fh, indent=2)


if __name__ == "__main__":
    main()
