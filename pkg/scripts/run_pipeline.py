#!/usr/bin/env python3
"""End-to-end demo: excitation design -> simulated data -> identification
-> gravity query -> drift test, all through the CLI.

Run from the repository root:

    python scripts/run_pipeline.py --workdir /tmp/psmdyn_demo
"""

import argparse
import json
import pathlib
import sys

from psmdyn.cli import main as cli


def run(argv):
    print("+ psmdyn " + " ".join(argv))
    rc = cli(argv)
    if rc != 0:
        sys.exit(f"command failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="/tmp/psmdyn_demo")
    ap.add_argument("--config", default="configs/psm_example.json")
    ap.add_argument("--limits", default="configs/psm_limits.json")
    ap.add_argument("--truth", default="configs/example_truth_params.json")
    ap.add_argument("--budget", type=int, default=800)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    wd = pathlib.Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)

    run(["gen-traj", "--config", args.config, "--limits", args.limits,
         "--seed", str(args.seed), "--budget", str(args.budget),
         "--out", str(wd / "excite")])

    noise = wd / "noise.json"
    noise.write_text(json.dumps({"tau_rel": 0.01}))
    run(["simulate", "--config", args.config, "--params", args.truth,
         "--traj", str(wd / "excite_fourier.json"), "--noise", str(noise),
         "--seed", str(args.seed), "--out", str(wd / "data.csv")])

    run(["identify", "--config", args.config, "--data", str(wd / "data.csv"),
         "--derivatives", "provided", "--out", str(wd / "ident")])

    run(["gravity", "--config", args.config,
         "--params", str(wd / "ident_params.json"),
         "--q", "0.2", "-0.3", "0.1", "0.5", "-0.2", "0.1", "0.0", "--json"])

    run(["drift-test", "--config", args.config,
         "--plant-params", args.truth,
         "--ident-params", str(wd / "ident_params.json"),
         "--limits", args.limits, "--n-poses", "3", "--seed", "42",
         "--out", str(wd / "drift")])

    print(f"\nall outputs in {wd}")
    print((wd / "drift_report.csv").read_text())


if __name__ == "__main__":
    main()
