#!/usr/bin/env python3
"""Scaling and differentiation-path timing over the procedural scenes."""

import argparse

from diffmesh.benchmarks import run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", choices=("falling", "stacked"), default="falling")
    ap.add_argument("--sizes", default="8,27,64")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    rows = run_benchmark(args.kind, [int(s) for s in args.sizes.split(",")],
                         out_csv=args.out, repetitions=args.reps)
    print(f"{'N':>6} {'fwd_ms':>12} {'bwd_qr_ms':>12} {'bwd_direct_ms':>14} "
          f"{'speedup':>8} {'peak_MB':>8}")
    for r in rows:
        print(f"{r.n:>6} {r.fwd_ms:>12.2f} {r.bwd_qr_ms:>12.2f} "
              f"{r.bwd_direct_ms:>14.2f} {r.bwd_direct_ms / r.bwd_qr_ms:>8.2f} "
              f"{r.peak_bytes / 1e6:>8.2f}")


if __name__ == "__main__":
    main()
