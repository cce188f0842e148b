"""Command-line pipeline: gen-traj, simulate, identify, gravity, drift-test.

Every command is deterministic under a fixed seed, takes explicit file
paths, and writes a manifest (inputs hashed, arguments echoed) next to its
outputs. Exit codes: 0 success, 2 input/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys

import numpy as np

from . import __version__
from .dynamics import load_params, regressor_batch, save_params
from .errors import ConfigError, ContractError, NumericalError, SimulationError
from .excitation import (
    JointLimits, default_limits, load_limits, load_trajectory,
    optimize_trajectory, save_trajectory_files,
)
from .gravsim import PDConfig, SimConfig, drift_test, gc_torque
from .identification import (
    IdentDataset, IdentOptions, identify, load_dataset_csv, preprocess,
    save_dataset_csv, save_report,
)
from .kinematics import Pose6
from .model import N_JOINTS, load_model_config


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(base: str, command: str, args: dict, seed,
                   inputs: list[str], outputs: list[str], results: dict | None = None):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "args": {k: v for k, v in args.items()
                 if v is not None and isinstance(v, (str, int, float, bool, list))},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    if results:
        manifest["results"] = results
    path = f"{base}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def _load_sim_config(path) -> tuple[SimConfig, PDConfig]:
    if path is None:
        return SimConfig(dt=1e-3), PDConfig()
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    known = {"dt", "duration", "stiction_vel", "breakaway", "breakaway_factor",
             "pd_omega_n", "pd_timeout", "pd_start_offset"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
    sim = SimConfig(
        dt=cfg.get("dt", 1e-3),
        duration=cfg.get("duration", 5.0),
        stiction_vel=cfg.get("stiction_vel", 1e-3),
        breakaway=np.array(cfg["breakaway"]) if "breakaway" in cfg else None,
        breakaway_factor=cfg.get("breakaway_factor", 1.5),
    )
    pd = PDConfig(omega_n=cfg.get("pd_omega_n", PDConfig.omega_n),
                  timeout=cfg.get("pd_timeout", PDConfig.timeout),
                  start_offset=cfg.get("pd_start_offset", PDConfig.start_offset),
                  dt=sim.dt)
    return sim, pd


# ---------------------------------------------------------------------------
# Subcommands

def cmd_gen_traj(args) -> int:
    model = load_model_config(args.config)
    limits = load_limits(args.limits) if args.limits else default_limits()
    opt = optimize_trajectory(
        model, limits, omega=2.0 * math.pi * args.freq, n_harmonics=args.harmonics,
        n_samples=args.samples, budget=args.budget, seed=args.seed, mode=args.mode)
    if not opt.feasible:
        print("error: no feasible trajectory found within budget", file=sys.stderr)
        return 3
    csv_path = f"{args.out}_traj.csv"
    sidecar = f"{args.out}_fourier.json"
    save_trajectory_files(opt.trajectory, csv_path, sidecar, sample_rate=args.rate)
    inputs = [args.config] + ([args.limits] if args.limits else [])
    write_manifest(args.out, "gen-traj", vars(args), args.seed, inputs,
                   [csv_path, sidecar], results={"cond_wb": opt.cond})
    print(f"cond(W B) = {opt.cond:.6g}")
    print(f"wrote {csv_path}, {sidecar}")
    return 0


def _load_noise(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    unknown = set(spec) - {"tau_rel", "tau_abs", "q_abs"}
    if unknown:
        raise ConfigError(f"unknown noise keys: {sorted(unknown)}")
    return spec


def cmd_simulate(args) -> int:
    model = load_model_config(args.config)
    delta = load_params(model, args.params)
    traj = load_trajectory(args.traj)
    noise = _load_noise(args.noise)
    n = int(round(traj.duration * args.rate)) + 1
    ts = np.linspace(0.0, traj.duration, n)
    Q, Qd, Qdd = traj.sample(ts)
    H = regressor_batch(model, Q, Qd, Qdd, delta.layout.mode)
    tau = H @ delta.values
    rng = np.random.default_rng(args.seed)
    if noise.get("q_abs"):
        Q = Q + rng.normal(0.0, noise["q_abs"], Q.shape)
    if noise.get("tau_rel"):
        tau = tau * (1.0 + rng.normal(0.0, noise["tau_rel"], tau.shape))
    if noise.get("tau_abs"):
        tau = tau + rng.normal(0.0, noise["tau_abs"], tau.shape)
    data = IdentDataset(ts, Q, tau, Qd, Qdd,
                        meta={"source": "simulated", "noise": noise})
    save_dataset_csv(data, args.out)
    inputs = [args.config, args.params, args.traj] + ([args.noise] if args.noise else [])
    write_manifest(args.out, "simulate", vars(args), args.seed, inputs, [args.out],
                   results={"noise": noise, "n_samples": n})
    print(f"wrote {args.out} ({n} samples)")
    return 0


def cmd_identify(args) -> int:
    model = load_model_config(args.config)
    raw = load_dataset_csv(args.data)
    data = preprocess(raw, args.cutoff,
                      use_provided_derivatives=(args.derivatives == "provided"))
    options = IdentOptions(lambda_rel=args.lambda_rel, m_min=args.m_min)
    try:
        result = identify(model, data, mode=args.mode, options=options)
    except NumericalError as exc:
        best = getattr(exc, "best_delta", None)
        if best is not None:
            save_params(model, best, f"{args.out}_failed_params.json")
            print(f"wrote best iterate to {args.out}_failed_params.json", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    params_path = f"{args.out}_params.json"
    report_path = f"{args.out}_report.json"
    save_params(model, result.delta, params_path)
    save_report(result, report_path)
    write_manifest(args.out, "identify", vars(args), args.seed,
                   [args.config, args.data], [params_path, report_path],
                   results={"residual_rms": result.residual_rms.tolist(),
                            "rank": result.rank, "cond_wb": result.cond_wb})
    print(f"rank {result.rank}/{result.delta.layout.dim}, "
          f"cond(W B) = {result.cond_wb:.4g}, "
          f"max residual RMS = {result.residual_rms.max():.4g}")
    print(f"wrote {params_path}, {report_path}")
    return 0


def cmd_gravity(args) -> int:
    model = load_model_config(args.config)
    delta = load_params(model, args.params)
    if len(args.q) != N_JOINTS:
        print(f"error: need exactly {N_JOINTS} joint values, got {len(args.q)}",
              file=sys.stderr)
        return 2
    g = gc_torque(model, delta, np.array(args.q, dtype=float),
                  include_stiffness=args.include_stiffness)
    if args.json:
        print(json.dumps({"q": list(args.q), "gravity_torque": g.tolist()}))
    else:
        print(" ".join(format(v, ".17g") for v in g))
    return 0


def _sample_targets(limits: JointLimits, n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    lo = limits.pos_min + 0.15 * (limits.pos_max - limits.pos_min)
    hi = limits.pos_max - 0.15 * (limits.pos_max - limits.pos_min)
    return [rng.uniform(lo, hi) for _ in range(n)]


REPORT_HEADER = "joint,pose_id,pd_pos_err,gc_pos_err,pd_tau,gc_tau,lb_tau,ub_tau,drifted"


def _report_rows(reports) -> list[str]:
    """Table rows for joints 1-3: deg (revolute) / mm (prismatic) errors."""
    rows = []
    scale = [math.degrees(1.0), math.degrees(1.0), 1000.0]
    for pose_id, rep in enumerate(reports, start=1):
        for j in range(3):
            vals = [rep.pd_pos_err[j] * scale[j], rep.gc_pos_err[j] * scale[j],
                    rep.pd_tau[j], rep.gc_tau[j], rep.lb_tau[j], rep.ub_tau[j]]
            cells = [str(j + 1), str(pose_id)]
            cells += [format(v, ".17g") if np.isfinite(v) else "nan" for v in vals]
            cells.append(str(rep.drifted).lower() if rep.settled else "error")
            rows.append(",".join(cells))
    return rows


def cmd_drift_test(args) -> int:
    model = load_model_config(args.config)
    plant = load_params(model, args.plant_params)
    ident = load_params(model, args.ident_params)
    sim, pd = _load_sim_config(args.sim_config)
    if args.poses:
        with open(args.poses, encoding="utf-8") as fh:
            targets = [np.array(v, dtype=float) for v in json.load(fh)["joint_targets"]]
    else:
        limits = load_limits(args.limits) if args.limits else default_limits()
        targets = _sample_targets(limits, args.n_poses, args.seed)
    reports = drift_test(model, plant, ident, targets, sim, pd,
                         with_bounds=not args.no_bounds, keep_logs=True)

    report_path = f"{args.out}_report.csv"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write("\n".join(_report_rows(reports)) + "\n")
    poses_path = f"{args.out}_poses.csv"
    with open(poses_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("pose_id," + Pose6.csv_header() + "\n")
        for pose_id, rep in enumerate(reports, start=1):
            fh.write(f"{pose_id}," + rep.pose.to_csv_row() + "\n")
    outputs = [report_path, poses_path]
    for pose_id, rep in enumerate(reports, start=1):
        if rep.gc_log is None:
            continue
        log_path = f"{args.out}_pose{pose_id}_log.csv"
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t," + ",".join(f"q{j}" for j in range(1, 8)) + ","
                     + ",".join(f"qd{j}" for j in range(1, 8)) + ","
                     + ",".join(f"tau{j}" for j in range(1, 8)) + "\n")
            stride = max(1, len(rep.gc_log.t) // 2000)
            for i in range(0, len(rep.gc_log.t), stride):
                row = np.concatenate([[rep.gc_log.t[i]], rep.gc_log.q[i],
                                      rep.gc_log.qd[i], rep.gc_log.tau_cmd[i]])
                fh.write(",".join(format(v, ".17g") for v in row) + "\n")
        outputs.append(log_path)

    inputs = [args.config, args.plant_params, args.ident_params]
    for opt_in in (args.poses, args.limits, args.sim_config):
        if opt_in:
            inputs.append(opt_in)
    write_manifest(args.out, "drift-test", vars(args), args.seed, inputs, outputs,
                   results={"drifted": [bool(r.drifted) for r in reports],
                            "settled": [bool(r.settled) for r in reports]})
    for pose_id, rep in enumerate(reports, start=1):
        if not rep.settled:
            print(f"warning: pose {pose_id} failed: {rep.message}", file=sys.stderr)
    print(f"wrote {report_path}")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psmdyn",
                                 description="Gravity-compensation pipeline tools")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traj", help="optimize an excitation trajectory")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--limits", help="joint limits JSON (default: built-in placeholder)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freq", type=float, default=0.1, help="base frequency, Hz")
    p.add_argument("--harmonics", type=int, default=5)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--rate", type=float, default=100.0, help="CSV sample rate, Hz")
    p.add_argument("--mode", choices=["gravity", "full"], default="gravity")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(fn=cmd_gen_traj)

    p = sub.add_parser("simulate", help="play a trajectory through the model")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True, help="ground-truth parameter JSON")
    p.add_argument("--traj", required=True, help="Fourier sidecar JSON")
    p.add_argument("--rate", type=float, default=200.0)
    p.add_argument("--noise", help="noise spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output data CSV path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("identify", help="solve the constrained identification")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="data CSV")
    p.add_argument("--mode", choices=["gravity", "full"], default="gravity")
    p.add_argument("--derivatives", choices=["estimated", "provided"],
                   default="estimated")
    p.add_argument("--cutoff", type=float, default=10.0, help="filter cutoff, Hz")
    p.add_argument("--lambda-rel", type=float, default=1e-8, dest="lambda_rel")
    p.add_argument("--m-min", type=float, default=1e-6, dest="m_min")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(fn=cmd_identify)

    p = sub.add_parser("gravity", help="print G(q) for a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--q", type=float, nargs="+", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--include-stiffness", action="store_true")
    p.set_defaults(fn=cmd_gravity)

    p = sub.add_parser("drift-test", help="PD settle + 5 s gravity hold per pose")
    p.add_argument("--config", required=True)
    p.add_argument("--plant-params", required=True)
    p.add_argument("--ident-params", required=True)
    p.add_argument("--poses", help="JSON with joint_targets list")
    p.add_argument("--limits", help="limits JSON used to sample default poses")
    p.add_argument("--n-poses", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sim-config", help="simulation config JSON")
    p.add_argument("--no-bounds", action="store_true", help="skip LB/UB search")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(fn=cmd_drift_test)
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, ContractError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
