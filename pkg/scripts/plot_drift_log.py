#!/usr/bin/env python3
"""Plot a drift-test hold-phase log: joint deviations against the 1 deg /
1 mm thresholds, plus the commanded efforts.

    python scripts/plot_drift_log.py /tmp/run/drift_pose1_log.csv -o hold.png
"""

import argparse

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("log_csv", help="<prefix>_pose<k>_log.csv from drift-test")
    ap.add_argument("-o", "--out", default="drift_log.png")
    args = ap.parse_args()

    data = np.loadtxt(args.log_csv, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    q = data[:, 1:8]
    tau = data[:, 15:22]
    dev = q - q[0]

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    for j in range(3):
        if j == 2:
            ax1.plot(t, 1000.0 * dev[:, j], label=f"joint {j + 1} [mm]")
        else:
            ax1.plot(t, np.degrees(dev[:, j]), label=f"joint {j + 1} [deg]")
    ax1.axhline(1.0, color="k", ls="--", lw=0.8, label="drift threshold")
    ax1.axhline(-1.0, color="k", ls="--", lw=0.8)
    ax1.set_ylabel("deviation from hold pose")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(True, alpha=0.3)

    for j in range(3):
        unit = "N" if j == 2 else "N*m"
        ax2.plot(t, tau[:, j], label=f"joint {j + 1} [{unit}]")
    ax2.set_xlabel("time [s]")
    ax2.set_ylabel("commanded effort")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(True, alpha=0.3)

    fig.suptitle("gravity-compensation hold phase")
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
