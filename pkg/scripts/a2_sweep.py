"""Sweep the A2 ratio of psi(t) over the stratified ball family for a ladder of t."""

import argparse
import os

import numpy as np

from nsmix.weights import BallFamily, a2_characteristic_estimate, write_sweep_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--t", default="2,4,8,16,32,64,128", help="comma-separated t ladder")
    p.add_argument("--weight", default="psi", choices=("psi", "min"))
    p.add_argument("--quadrature-n", type=int, default=256)
    p.add_argument("--radii", type=int, default=41, help="number of log-spaced radii in [1e-2, 1e3]")
    p.add_argument("--out-dir", default="out/a2_sweep")
    args = p.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    family = BallFamily(radii=np.logspace(-2, 3, args.radii))
    rows = []
    for t in (float(x) for x in args.t.split(",")):
        est = a2_characteristic_estimate(t, family, args.weight, args.quadrature_n)
        rows.extend(est.rows)
        print(f"t={t:g}  sup ratio {est.value:.4f} at |x0|={est.x0_norm:.3g}, R={est.R:.3g}")
    write_sweep_csv(os.path.join(args.out_dir, "a2_sweep.csv"), rows)


if __name__ == "__main__":
    main()
