#!/usr/bin/env python3
"""Generate a physically consistent example parameter file for the demo.

Masses and CoM positions are drawn inside each link's hull; friction, motor
inertia and stiffness get plausible magnitudes. Deterministic per seed.
"""

import argparse

import numpy as np

from psmdyn.dynamics import ParamVector, save_params
from psmdyn.model import load_model_config, param_layout


def sample_consistent_params(model, seed=7, mode="gravity"):
    lay = param_layout(model, mode)
    rng = np.random.default_rng(seed)
    vals = np.zeros(lay.dim)
    for f in model.frames:
        if f.has_link_inertia:
            idx = lay.frame_slice(f.id, "inertial")
            m = rng.uniform(0.5, 5.0)
            w = rng.dirichlet(np.ones(len(f.hull_vertices)))
            com = 0.6 * (w @ f.hull_vertices)
            vals[idx[0]] = m
            vals[idx[1]:idx[3] + 1] = m * com
        if f.has_friction:
            idx = lay.frame_slice(f.id, "friction")
            vals[idx[0]] = rng.uniform(0.15, 0.5)
            vals[idx[1]] = rng.uniform(0.05, 0.3)
            vals[idx[2]] = rng.uniform(-0.02, 0.02)
        if f.has_motor_inertia:
            vals[lay.frame_slice(f.id, "motor")[0]] = rng.uniform(1e-4, 1e-2)
        if f.has_stiffness:
            vals[lay.frame_slice(f.id, "stiffness")[0]] = 0.05
    return ParamVector(lay, vals)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/psm_example.json")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="configs/example_truth_params.json")
    args = ap.parse_args()
    model = load_model_config(args.config)
    delta = sample_consistent_params(model, args.seed)
    save_params(model, delta, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
