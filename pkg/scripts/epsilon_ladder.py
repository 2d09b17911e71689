"""Truncation constant epsilon(N) of the cut-off Poincare inequality on an N ladder."""

import argparse
import csv
import os
import time

from nsmix.spectral import Grid, truncated_poincare_epsilon


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--M", type=int, default=512)
    p.add_argument("--L", type=float, default=4.4)
    p.add_argument("--A", type=float, help="cut-off radius (default L/4)")
    p.add_argument("--N", default="16384,36864,65536")
    p.add_argument("--method", default="lanczos", choices=("lanczos", "power"))
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out-dir", default="out/epsilon")
    args = p.parse_args()

    g = Grid(args.M, args.L)
    A = args.A or args.L / 4
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "epsilon.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["M", "L", "A", "N", "epsilon", "seconds"])
        for N in (int(x) for x in args.N.split(",")):
            t0 = time.perf_counter()
            eps = truncated_poincare_epsilon(g, N, A, tol=args.tol, max_iter=3000, method=args.method)
            sec = time.perf_counter() - t0
            wr.writerow([args.M, args.L, A, N, repr(eps), f"{sec:.1f}"])
            print(f"N={N:6d}  epsilon={eps:.5f}  ({sec:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
