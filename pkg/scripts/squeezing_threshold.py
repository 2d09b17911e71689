"""Measure the smallest control dimension N whose coupled difference decays at rate a/2 or faster."""

import argparse
import json
import os

import numpy as np

from nsmix.ensemble import simulate_paths
from nsmix.experiments import ExperimentConfig, difference_slopes, initial_pair, squeezing_threshold, write_json
from nsmix.noise import CounterStream


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="JSON experiment config (defaults to a weakly forced low-viscosity box)")
    p.add_argument("--N", default="0,2,4,8,16")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--spin-up", type=float, default=40.0)
    p.add_argument("--T", type=float, default=5.0)
    p.add_argument("--perturbation", type=float, default=0.5)
    p.add_argument("--out-dir", default="out/squeezing")
    args = p.parse_args()

    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
        cfg.grid.M, cfg.grid.L = 32, float(np.pi)
        cfg.integrator.nu, cfg.integrator.a, cfg.integrator.dt = 0.005, 0.05, 0.005
        cfg.noise.h_coeffs = [0.1] * 8
        cfg.noise.b0 = 0.3
    st = cfg.build_stepper()
    g, J = st.grid, st.spec.J
    u0, _ = initial_pair(cfg, g, args.pairs)
    n_spin = int(round(args.spin_up / st.cfg.dt))
    u = simulate_paths(st, u0, CounterStream(1, "spin", J), n_steps=n_spin, with_ledger=False).final
    pert = g.random_solenoidal(np.random.default_rng(3), args.pairs) * args.perturbation
    slopes = difference_slopes(st, u, u + pert, [int(x) for x in args.N.split(",")], args.T)
    target = -st.cfg.a / 2
    for N, s in slopes.items():
        print(f"N={N:3d}  mean slope {np.mean(s):+.4f}  worst {np.max(s):+.4f}")
    N_star = squeezing_threshold(slopes, target)
    print(f"threshold (worst slope <= {target}): {N_star}")
    os.makedirs(args.out_dir, exist_ok=True)
    write_json(os.path.join(args.out_dir, "slopes.json"),
               {"target": target, "threshold": N_star, "slopes": {str(k): v for k, v in slopes.items()},
                "config": json.loads(cfg.to_json())})


if __name__ == "__main__":
    main()
