"""Periodic excitation trajectories and condition-number optimization.

Each joint follows a truncated Fourier series parameterized so velocity
coefficients are the free variables:

    q_i(t) = q0_i + sum_k  a_ik/(k w) sin(k w t) - b_ik/(k w) cos(k w t)
    qd_i(t) = sum_k  a_ik cos(k w t) + b_ik sin(k w t)

The optimizer is a seeded multi-start randomized coordinate search with an
exterior penalty on limit violations; the objective is the condition number
of the stacked regressor projected onto the identifiable subspace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import base_parameter_analysis, regressor_batch
from .errors import ConfigError, ContractError
from .kinematics import RobotState
from .model import ChainModel, N_JOINTS, param_layout


@dataclass
class FourierTrajectory:
    base_freq: float                  # rad/s
    offsets: np.ndarray               # (7,)
    a: np.ndarray                     # (7, N) velocity sine coefficients
    b: np.ndarray                     # (7, N) velocity cosine coefficients
    duration: float

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if self.a.shape != self.b.shape or self.a.shape[0] != N_JOINTS:
            raise ContractError("coefficient arrays must be (7, N)")
        if self.duration < 2.0 * np.pi / self.base_freq - 1e-12:
            raise ContractError("duration must cover at least one full period")

    @property
    def n_harmonics(self) -> int:
        return self.a.shape[1]

    def sample(self, ts: np.ndarray):
        """Vectorized evaluation: returns (Q, Qd, Qdd), each (len(ts), 7)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        k = np.arange(1, self.n_harmonics + 1)
        kw = k * self.base_freq                     # (N,)
        ang = np.outer(ts, kw)                      # (m, N)
        s, c = np.sin(ang), np.cos(ang)
        Q = self.offsets[None, :] + (s @ (self.a / kw).T) - (c @ (self.b / kw).T)
        Qd = c @ self.a.T + s @ self.b.T
        Qdd = -(s * kw) @ self.a.T + (c * kw) @ self.b.T
        return Q, Qd, Qdd


def evaluate(traj: FourierTrajectory, t: float) -> RobotState:
    if not (0.0 <= t <= traj.duration):
        raise ContractError(f"t = {t} outside [0, {traj.duration}]")
    Q, Qd, Qdd = traj.sample(np.array([t]))
    return RobotState(Q[0], Qd[0], Qdd[0])


@dataclass
class JointLimits:
    pos_min: np.ndarray
    pos_max: np.ndarray
    vel_max: np.ndarray
    acc_max: np.ndarray

    def __post_init__(self):
        for name in ("pos_min", "pos_max", "vel_max", "acc_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for j in range(N_JOINTS):
            if not self.pos_min[j] < self.pos_max[j]:
                raise ConfigError(f"joint {j + 1}: pos_min >= pos_max")
            if self.vel_max[j] <= 0 or self.acc_max[j] <= 0:
                raise ConfigError(f"joint {j + 1}: rate limits must be positive")

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.pos_min + self.pos_max)

    def violations(self, state) -> list[str]:
        """Per-joint limit violations of a robot state (positions and rates)."""
        out = []
        for j in range(N_JOINTS):
            if not (self.pos_min[j] <= state.q[j] <= self.pos_max[j]):
                out.append(f"joint {j + 1}: position limit")
            if abs(state.qd[j]) > self.vel_max[j]:
                out.append(f"joint {j + 1}: velocity limit")
            if abs(state.qdd[j]) > self.acc_max[j]:
                out.append(f"joint {j + 1}: acceleration limit")
        return out


#: Conservative placeholder limits (SI: rad / m). Not manufacturer data.
DEFAULT_LIMITS = dict(
    pos_min=[-1.0, -0.8, 0.0, -2.0, -1.3, -1.3, -1.3],
    pos_max=[1.0, 0.8, 0.24, 2.0, 1.3, 1.3, 1.3],
    vel_max=[1.5, 1.5, 0.2, 3.0, 3.0, 3.0, 3.0],
    acc_max=[5.0, 5.0, 1.0, 10.0, 10.0, 10.0, 10.0],
)


def default_limits() -> JointLimits:
    return JointLimits(**{k: np.array(v) for k, v in DEFAULT_LIMITS.items()})


def load_limits(path) -> JointLimits:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if cfg.get("units") != "SI":
        raise ConfigError('limits file must declare "units": "SI" (rad, m, s)')
    try:
        return JointLimits(cfg["pos_min"], cfg["pos_max"], cfg["vel_max"], cfg["acc_max"])
    except KeyError as exc:
        raise ConfigError(f"limits file missing key {exc}") from exc


@dataclass
class FeasibilityReport:
    ok: bool
    pos_peak: np.ndarray   # (7, 2) min/max
    vel_peak: np.ndarray   # (7,)
    acc_peak: np.ndarray   # (7,)
    violations: list[str] = field(default_factory=list)


def feasibility(traj: FourierTrajectory, limits: JointLimits, n_check: int) -> FeasibilityReport:
    periods = traj.duration * traj.base_freq / (2.0 * np.pi)
    if n_check < 100 * periods:
        raise ContractError("n_check must give at least 100 samples per period")
    ts = np.linspace(0.0, traj.duration, n_check)
    Q, Qd, Qdd = traj.sample(ts)
    pos_peak = np.stack([Q.min(axis=0), Q.max(axis=0)], axis=1)
    vel_peak = np.abs(Qd).max(axis=0)
    acc_peak = np.abs(Qdd).max(axis=0)
    violations = []
    for j in range(N_JOINTS):
        if pos_peak[j, 0] < limits.pos_min[j] or pos_peak[j, 1] > limits.pos_max[j]:
            violations.append(f"joint {j + 1}: position limit")
        if vel_peak[j] > limits.vel_max[j]:
            violations.append(f"joint {j + 1}: velocity limit")
        if acc_peak[j] > limits.acc_max[j]:
            violations.append(f"joint {j + 1}: acceleration limit")
    return FeasibilityReport(not violations, pos_peak, vel_peak, acc_peak, violations)


def stack_regressor(model: ChainModel, traj: FourierTrajectory, n_samples: int,
                    mode: str = "gravity"):
    """Stacked regressor over uniformly spaced sample times.

    Returns (W, ts): W is (7 * n_samples, p); torque slots line up with
    W's rows when filled sample-major (see identification.assemble). Full
    column coverage needs n_samples >= p/7; fewer samples still stack.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be positive")
    ts = np.linspace(0.0, traj.duration, n_samples, endpoint=False)
    Q, Qd, Qdd = traj.sample(ts)
    H = regressor_batch(model, Q, Qd, Qdd, mode)
    return H.reshape(-1, H.shape[2]), ts


def conditioning(W: np.ndarray, basis: np.ndarray) -> float:
    sv = np.linalg.svd(W @ basis, compute_uv=False)
    if sv[-1] <= 0.0 or not np.isfinite(sv[-1]):
        return np.inf
    return float(sv[0] / sv[-1])


@dataclass
class TrajectoryOptimization:
    trajectory: FourierTrajectory
    cond: float
    feasible: bool
    n_evaluations: int
    basis: np.ndarray


def _zero_start_project(a: np.ndarray) -> np.ndarray:
    """Force qd(0) = 0 exactly: per joint the a-coefficients must sum to 0."""
    return a - a.mean(axis=1, keepdims=True)


def _random_candidate(rng, limits: JointLimits, omega: float, n_harm: int,
                      duration: float, zero_start: bool) -> FourierTrajectory:
    amp = 0.35 * (limits.pos_max - limits.pos_min) / 2.0
    # velocity coefficient scale: position amplitude of harmonic k is |coef|/(k w)
    scale = amp * omega / np.sqrt(n_harm)
    a = rng.uniform(-1.0, 1.0, (N_JOINTS, n_harm)) * scale[:, None]
    b = rng.uniform(-1.0, 1.0, (N_JOINTS, n_harm)) * scale[:, None]
    if zero_start:
        a = _zero_start_project(a)
    return FourierTrajectory(omega, limits.mid.copy(), a, b, duration)


def identifiable_basis(model: ChainModel, limits: JointLimits, seed: int,
                       mode: str = "gravity", oversample: int = 2) -> np.ndarray:
    """Identifiable-subspace basis estimated from random in-range states."""
    lay = param_layout(model, mode)
    rng = np.random.default_rng(seed)
    n = oversample * lay.dim
    states = [
        RobotState(rng.uniform(limits.pos_min, limits.pos_max),
                   rng.uniform(-limits.vel_max, limits.vel_max),
                   rng.uniform(-limits.acc_max, limits.acc_max))
        for _ in range(n)
    ]
    return base_parameter_analysis(model, states, mode).basis


def optimize_trajectory(model: ChainModel, limits: JointLimits,
                        omega: float = 2.0 * np.pi * 0.1,
                        n_harmonics: int = 5,
                        n_samples: int = 100,
                        budget: int = 2000,
                        seed: int = 0,
                        mode: str = "gravity",
                        zero_start: bool = True,
                        basis: np.ndarray | None = None,
                        penalty_weight: float = 1e6,
                        n_starts: int = 4) -> TrajectoryOptimization:
    """Minimize cond(W @ B) over Fourier coefficients, penalizing limit
    violations; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    duration = 2.0 * np.pi / omega
    if basis is None:
        basis = identifiable_basis(model, limits, seed, mode)
    ts = np.linspace(0.0, duration, n_samples, endpoint=False)

    def score(traj: FourierTrajectory):
        Q, Qd, Qdd = traj.sample(ts)
        viol = (np.maximum(0.0, limits.pos_min - Q).sum()
                + np.maximum(0.0, Q - limits.pos_max).sum()
                + np.maximum(0.0, np.abs(Qd) - limits.vel_max).sum()
                + np.maximum(0.0, np.abs(Qdd) - limits.acc_max).sum())
        H = regressor_batch(model, Q, Qd, Qdd, mode)
        cond = conditioning(H.reshape(-1, H.shape[2]), basis)
        if not np.isfinite(cond):
            cond = 1e18
        return cond + penalty_weight * viol, cond, viol

    best = None
    n_eval = 0
    evals_per_start = max(1, budget // max(1, n_starts))
    for _ in range(n_starts):
        cur = _random_candidate(rng, limits, omega, n_harmonics, duration, zero_start)
        cur_score = score(cur)
        n_eval += 1
        if best is None or cur_score[0] < best[1][0]:
            best = (cur, cur_score)
        step = 0.5
        for it in range(evals_per_start - 1):
            cand_a = cur.a.copy()
            cand_b = cur.b.copy()
            off = cur.offsets.copy()
            n_mut = 1 + int(rng.integers(0, 3))
            for _ in range(n_mut):
                j = int(rng.integers(0, N_JOINTS))
                what = int(rng.integers(0, 3))
                scale = step * 0.35 * (limits.pos_max[j] - limits.pos_min[j]) / 2.0
                if what == 0:
                    k = int(rng.integers(0, n_harmonics))
                    cand_a[j, k] += rng.normal() * scale * omega
                elif what == 1:
                    k = int(rng.integers(0, n_harmonics))
                    cand_b[j, k] += rng.normal() * scale * omega
                else:
                    off[j] = np.clip(off[j] + rng.normal() * scale,
                                     limits.pos_min[j], limits.pos_max[j])
            if zero_start:
                cand_a = _zero_start_project(cand_a)
            cand = FourierTrajectory(omega, off, cand_a, cand_b, duration)
            cand_score = score(cand)
            n_eval += 1
            if cand_score[0] < cur_score[0]:
                cur, cur_score = cand, cand_score
                if cand_score[0] < best[1][0]:
                    best = (cand, cand_score)
            step = max(0.02, step * 0.999)

    traj, (_, cond, viol) = best
    return TrajectoryOptimization(
        trajectory=traj,
        cond=cond,
        feasible=bool(viol == 0.0),
        n_evaluations=n_eval,
        basis=basis,
    )


# ---------------------------------------------------------------------------
# File I/O

def save_trajectory_files(traj: FourierTrajectory, csv_path, sidecar_path,
                          sample_rate: float = 100.0) -> None:
    """CSV: t,q1..q7,qd1..qd7,qdd1..qdd7 (SI) + JSON sidecar with coefficients."""
    n = int(round(traj.duration * sample_rate)) + 1
    ts = np.linspace(0.0, traj.duration, n)
    Q, Qd, Qdd = traj.sample(ts)
    header = ("t," + ",".join(f"q{j}" for j in range(1, 8))
              + "," + ",".join(f"qd{j}" for j in range(1, 8))
              + "," + ",".join(f"qdd{j}" for j in range(1, 8)))
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(n):
            row = np.concatenate([[ts[i]], Q[i], Qd[i], Qdd[i]])
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    sidecar = {
        "base_freq": traj.base_freq,
        "duration": traj.duration,
        "offsets": traj.offsets.tolist(),
        "a": traj.a.tolist(),
        "b": traj.b.tolist(),
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


def load_trajectory(sidecar_path) -> FourierTrajectory:
    with open(sidecar_path, encoding="utf-8") as fh:
        d = json.load(fh)
    return FourierTrajectory(d["base_freq"], np.array(d["offsets"]),
                             np.array(d["a"]), np.array(d["b"]), d["duration"])
