"""Gravity-compensation hold tests on a stiction-aware forward simulator.

The plant integrates M(q) qdd = tau_cmd - C(q,qd)qd - G(q) - spring - friction
with a Karnopp stiction model: a joint whose speed is inside the dead band
locks, and stays locked while the torque required to hold it is below its
breakaway level. Integration is fixed-step semi-implicit Euler. The drift
protocol mirrors a hardware validation: settle on a pose under PD control,
switch to open-loop gravity feedforward for 5 seconds, and flag drift when
any revolute joint moves more than 1 degree or the prismatic joint more
than 1 mm.

Structured controllers (zero / constant / PD / gravity feedforward) run
through a compiled stepping kernel; arbitrary callables fall back to a
numpy stepper with identical semantics. A locked state with holding margins
is an exact fixed point of the stepper, so holds that never break away end
early and the log is padded with the constant state (identical to stepping
through).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _simkernel
from .dynamics import (
    ParamVector, _DeltaStruct, gravity_torque, mass_and_bias, synthesize_full_params,
)
from .errors import ConfigError, SimulationError
from .kinematics import Pose6, RobotState, compiled, rcm_pose
from .model import ChainModel, N_JOINTS

#: Per-joint drift thresholds: 1 degree for revolute joints, 1 mm for the
#: prismatic insertion joint.
DRIFT_THRESHOLDS = np.array([math.radians(1.0)] * 2 + [1e-3] + [math.radians(1.0)] * 4)


@dataclass
class SimConfig:
    dt: float = 1e-4
    duration: float = 5.0
    stiction_vel: float = 1e-3          # rad/s or m/s dead band
    breakaway: np.ndarray | None = None  # per-joint effort; None -> derived
    breakaway_factor: float = 1.5        # times the joint Coulomb level
    cond_limit: float = 1e12
    log_stride: int = 1
    integrator: str = "semi_implicit"

    def __post_init__(self):
        if not (0.0 < self.dt <= 1e-2):
            raise ConfigError("dt must lie in (0, 1e-2]")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.breakaway is not None:
            self.breakaway = np.asarray(self.breakaway, dtype=float)
        if self.integrator != "semi_implicit":
            raise ConfigError(f"unknown integrator {self.integrator!r}")

    def replace(self, **kw) -> "SimConfig":
        base = dict(dt=self.dt, duration=self.duration, stiction_vel=self.stiction_vel,
                    breakaway=self.breakaway, breakaway_factor=self.breakaway_factor,
                    cond_limit=self.cond_limit, log_stride=self.log_stride,
                    integrator=self.integrator)
        base.update(kw)
        return SimConfig(**base)


@dataclass
class SimLog:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    tau_cmd: np.ndarray
    reached_fixed_point: bool = False
    stopped_early: bool = False


# Structured controllers understood by the compiled kernel.

@dataclass
class ZeroController:
    pass


@dataclass
class ConstantController:
    tau: np.ndarray


@dataclass
class PDController:
    target: np.ndarray
    kp: np.ndarray
    kd: np.ndarray


@dataclass
class GravityController:
    delta: ParamVector
    include_stiffness: bool = False


def gc_torque(model: ChainModel, delta: ParamVector, q: np.ndarray,
              include_stiffness: bool = False) -> np.ndarray:
    """The open-loop hold command: exactly the gravity term."""
    return gravity_torque(model, q, delta, include_stiffness=include_stiffness)


def coulomb_levels(model: ChainModel, delta: ParamVector) -> np.ndarray:
    """Per-joint kinetic Coulomb magnitude when that joint moves alone."""
    struct = _DeltaStruct(model, delta)
    lvl = np.zeros(N_JOINTS)
    for c, Fc, _, _ in struct.friction:
        lvl += np.abs(c) * abs(Fc)
    return lvl


def effective_breakaway(model: ChainModel, delta: ParamVector, cfg: SimConfig) -> np.ndarray:
    """Breakaway efforts, never below the Coulomb level."""
    lvl = coulomb_levels(model, delta)
    if cfg.breakaway is None:
        return cfg.breakaway_factor * lvl
    return np.maximum(cfg.breakaway, lvl)


class _Plant:
    """Flat plant arrays shared by the kernel and the numpy stepper."""

    def __init__(self, model: ChainModel, delta: ParamVector, cfg: SimConfig):
        self.model = model
        self.cfg = cfg
        self.full = synthesize_full_params(model, delta)
        struct = _DeltaStruct(model, delta)
        self.C = np.array([c for c, *_ in struct.friction]).reshape(-1, N_JOINTS)
        fr = np.array([[Fc, Fv, Fo] for _, Fc, Fv, Fo in struct.friction]).reshape(-1, 3)
        self.Fc, self.Fv, self.Fo = (np.ascontiguousarray(fr[:, i]) for i in range(3))
        self.springs = struct.stiffness
        self.sp_rows = np.array([c for c, _ in struct.stiffness]).reshape(-1, N_JOINTS)
        self.sp_k = np.array([k for _, k in struct.stiffness])
        self.breakaway = effective_breakaway(model, delta, cfg)
        self.chain_args = _chain_arrays(model)
        self.inert_args = _inertial_arrays(model, self.full)
        struct_full = _DeltaStruct(model, self.full)
        self.mo_rows = np.array([c for c, _ in struct_full.motor]).reshape(-1, N_JOINTS)
        self.mo_I = np.array([v for _, v in struct_full.motor])

    def friction(self, qd: np.ndarray) -> np.ndarray:
        ve = self.C @ qd
        return self.C.T @ (self.Fc * np.sign(ve) + self.Fv * ve + self.Fo)

    def spring(self, q: np.ndarray) -> np.ndarray:
        tau = np.zeros(N_JOINTS)
        for c, Ks in self.springs:
            tau += c * (Ks * (c @ q - self.model.spring_rest))
        return tau

    def hold_command(self, q: np.ndarray) -> np.ndarray:
        """Command making the net effort zero at rest (gravity + spring + offsets)."""
        _, bias = mass_and_bias(self.model, q, np.zeros(N_JOINTS), self.full)
        return bias + self.spring(q) + self.C.T @ self.Fo

    def step(self, q: np.ndarray, qd: np.ndarray, tau_cmd: np.ndarray,
             clamp: np.ndarray, check_cond: bool = False):
        """One Karnopp semi-implicit step (numpy path)."""
        cfg = self.cfg
        qd_eff = np.where((np.abs(qd) < cfg.stiction_vel) | clamp, 0.0, qd)
        M, bias = mass_and_bias(self.model, q, qd_eff, self.full)
        rhs = tau_cmd - bias - self.friction(qd_eff) - self.spring(q)
        locked = (qd_eff == 0.0) | clamp
        for _ in range(N_JOINTS + 1):
            free = ~locked
            qdd = np.zeros(N_JOINTS)
            if free.any():
                sub = M[np.ix_(free, free)]
                if check_cond and np.linalg.cond(sub) > cfg.cond_limit:
                    raise SimulationError("mass matrix near-singular")
                qdd[free] = np.linalg.solve(sub, rhs[free])
            hold = M[np.ix_(locked, free)] @ qdd[free] - rhs[locked]
            breaking = (np.abs(hold) > self.breakaway[locked]) & ~clamp[locked]
            if not breaking.any():
                break
            idx = np.where(locked)[0][breaking]
            locked[idx] = False
        qd_new = qd_eff + cfg.dt * qdd
        qd_new[locked] = 0.0
        q_new = q + cfg.dt * qd_new
        return q_new, qd_new, bool(locked.all())


def _chain_arrays(model: ChainModel):
    cc = compiled(model)
    R_pre = cc.R_pre.copy()
    t_const = cc.t_const.copy()
    u_d = cc.u_d.copy()
    S = cc.root_rotation
    for i in range(cc.n):
        if cc.parent[i] < 0:
            R_pre[i] = S @ R_pre[i]
            t_const[i] = S @ t_const[i]
            u_d[i] = S @ u_d[i]
    return (cc.parent.astype(np.int64), cc.kind.astype(np.int64),
            np.ascontiguousarray(R_pre), np.ascontiguousarray(t_const),
            np.ascontiguousarray(u_d), np.ascontiguousarray(cc.coupling),
            model.gravity.astype(float))


def _inertial_arrays(model: ChainModel, delta: ParamVector):
    cc = compiled(model)
    struct = _DeltaStruct(model, delta)
    nl = len(struct.inertial)
    idx = np.zeros(nl, dtype=np.int64)
    m = np.zeros(nl)
    h = np.zeros((nl, 3))
    inertia = np.zeros((nl, 3, 3))
    for k, (i, mk, hk, Ik) in enumerate(struct.inertial):
        idx[k] = i
        m[k] = mk
        h[k] = hk
        if Ik is not None:
            inertia[k] = Ik
    return idx, m, h, inertia


def simulate(model: ChainModel, delta_true: ParamVector, controller,
             x0: RobotState, cfg: SimConfig,
             clamp: np.ndarray | None = None,
             monitor: tuple[np.ndarray, np.ndarray] | None = None,
             allow_early_exit: bool = False) -> SimLog:
    """Integrate the plant under a controller.

    ``controller`` is a structured controller (fast compiled path) or any
    callable ``(t, q, qd) -> tau``. ``clamp`` marks joints held by ideal
    clamps. ``monitor = (q_ref, thresholds)`` stops the run once any joint
    deviates beyond its threshold. A fully locked state with holding margins
    is an exact fixed point, so the run ends there and the log is padded
    with the constant tail; structured controllers are memoryless so this is
    always valid, while arbitrary callables get it only with
    ``allow_early_exit``.
    """
    clamp = np.zeros(N_JOINTS, dtype=bool) if clamp is None else np.asarray(clamp, dtype=bool)
    if isinstance(controller, (ZeroController, ConstantController, PDController,
                               GravityController)):
        return _simulate_kernel(model, delta_true, controller, x0, cfg, clamp,
                                monitor, allow_early_exit)
    return _simulate_python(model, delta_true, controller, x0, cfg, clamp,
                            monitor, allow_early_exit)


def _simulate_kernel(model, delta_true, controller, x0, cfg, clamp, monitor,
                     allow_early_exit) -> SimLog:
    plant = _Plant(model, delta_true, cfg)
    n_steps = int(round(cfg.duration / cfg.dt))
    n_log = n_steps // cfg.log_stride + 1
    log_t = np.zeros(n_log)
    log_q = np.zeros((n_log, N_JOINTS))
    log_qd = np.zeros((n_log, N_JOINTS))
    log_tau = np.zeros((n_log, N_JOINTS))

    z7 = np.zeros(N_JOINTS)
    ctrl_code, v1, v2, v3 = 0, z7, z7, z7
    gi_idx = np.zeros(0, dtype=np.int64)
    gi_m = np.zeros(0)
    gi_h = np.zeros((0, 3))
    gi_I = np.zeros((0, 3, 3))
    g_sp_rows = np.zeros((0, N_JOINTS))
    g_sp_k = np.zeros(0)
    gc_with_spring = 0
    if isinstance(controller, ConstantController):
        ctrl_code, v1 = 1, np.asarray(controller.tau, dtype=float)
    elif isinstance(controller, PDController):
        ctrl_code = 2
        v1 = np.asarray(controller.target, dtype=float)
        v2 = np.asarray(controller.kp, dtype=float)
        v3 = np.asarray(controller.kd, dtype=float)
    elif isinstance(controller, GravityController):
        ctrl_code = 3
        gi_idx, gi_m, gi_h, gi_I = _inertial_arrays(model, controller.delta)
        if controller.include_stiffness:
            gc_with_spring = 1
            struct_i = _DeltaStruct(model, controller.delta)
            g_sp_rows = np.array([c for c, _ in struct_i.stiffness]).reshape(-1, N_JOINTS)
            g_sp_k = np.array([k for _, k in struct_i.stiffness])

    if monitor is None:
        monitor_on, q_ref, thr = 0, z7, np.full(N_JOINTS, np.inf)
    else:
        monitor_on = 1
        q_ref = np.asarray(monitor[0], dtype=float)
        thr = np.asarray(monitor[1], dtype=float)

    k_log, status, last_k = _simkernel.sim_loop(
        *plant.chain_args, *plant.inert_args, plant.mo_rows, plant.mo_I,
        plant.C, plant.Fc, plant.Fv, plant.Fo, plant.sp_rows, plant.sp_k,
        float(model.spring_rest), plant.breakaway, cfg.stiction_vel, cfg.dt,
        n_steps, clamp, ctrl_code, v1, v2, v3,
        gi_idx, gi_m, gi_h, gi_I, g_sp_rows, g_sp_k, gc_with_spring,
        monitor_on, q_ref, thr, cfg.cond_limit, 200, cfg.log_stride,
        log_t, log_q, log_qd, log_tau,
        x0.q.astype(float), x0.qd.astype(float))
    if status == 3:
        raise SimulationError("mass matrix near-singular")
    # a locked fixed point is exact: the padded tail equals stepping through
    fixed_point = status == 1
    stopped = status == 2
    if fixed_point:
        for k in range(last_k + 1, n_steps + 1):
            if k % cfg.log_stride == 0:
                log_t[k_log] = k * cfg.dt
                log_q[k_log] = log_q[k_log - 1]
                log_qd[k_log] = log_qd[k_log - 1]
                log_tau[k_log] = log_tau[k_log - 1]
                k_log += 1
    return SimLog(log_t[:k_log], log_q[:k_log], log_qd[:k_log], log_tau[:k_log],
                  reached_fixed_point=fixed_point, stopped_early=stopped)


def _simulate_python(model, delta_true, controller, x0, cfg, clamp, monitor,
                     allow_early_exit) -> SimLog:
    n_steps = int(round(cfg.duration / cfg.dt))
    plant = _Plant(model, delta_true, cfg)
    q = x0.q.copy()
    qd = x0.qd.copy()
    rows_t, rows_q, rows_qd, rows_tau = [], [], [], []
    fixed_point = False
    stopped = False
    prev_all_locked = np.all(np.abs(qd) < cfg.stiction_vel)
    last_k = 0
    for k in range(n_steps + 1):
        t = k * cfg.dt
        tau_cmd = np.asarray(controller(t, q, qd), dtype=float)
        if k % cfg.log_stride == 0:
            rows_t.append(t)
            rows_q.append(q.copy())
            rows_qd.append(qd.copy())
            rows_tau.append(tau_cmd.copy())
        last_k = k
        if k == n_steps:
            break
        if monitor is not None and np.any(np.abs(q - monitor[0]) > monitor[1]):
            stopped = True
            break
        q, qd, all_locked = plant.step(q, qd, tau_cmd, clamp, check_cond=(k % 200 == 0))
        if allow_early_exit and all_locked and prev_all_locked:
            fixed_point = True
            break
        prev_all_locked = all_locked
    if fixed_point:
        for k in range(last_k + 1, n_steps + 1):
            if k % cfg.log_stride == 0:
                rows_t.append(k * cfg.dt)
                rows_q.append(rows_q[-1])
                rows_qd.append(rows_qd[-1])
                rows_tau.append(rows_tau[-1])
    return SimLog(np.array(rows_t), np.array(rows_q), np.array(rows_qd),
                  np.array(rows_tau), reached_fixed_point=fixed_point,
                  stopped_early=stopped)


# ---------------------------------------------------------------------------
# Drift protocol

@dataclass
class PDConfig:
    omega_n: float = 8.0 * math.pi     # rad/s per-joint bandwidth
    settle_window: float = 0.5         # s of quiet before switching
    timeout: float = 10.0              # s
    start_offset: float = 0.05         # rad / m initial error per joint
    dt: float = 1e-3


@dataclass
class DriftReport:
    target: np.ndarray
    pose: Pose6
    settled: bool
    drifted: bool
    pd_pos_err: np.ndarray
    gc_pos_err: np.ndarray
    pd_tau: np.ndarray
    gc_tau: np.ndarray
    lb_tau: np.ndarray
    ub_tau: np.ndarray
    gc_log: SimLog | None = None
    message: str = ""


def detect_drift(q_traj: np.ndarray, q_ref: np.ndarray) -> bool:
    """The 1 degree / 1 mm rule over a logged joint trajectory."""
    dev = np.abs(q_traj - q_ref[None, :]).max(axis=0)
    return bool(np.any(dev > DRIFT_THRESHOLDS))


def pd_gains(model: ChainModel, delta: ParamVector, q: np.ndarray,
             omega_n: float) -> tuple[np.ndarray, np.ndarray]:
    """Critically damped per-joint gains from the diagonal mass at the pose."""
    M, _ = mass_and_bias(model, q, np.zeros(N_JOINTS), synthesize_full_params(model, delta))
    mj = np.maximum(np.diag(M), 1e-4)
    kp = mj * omega_n ** 2
    kd = 2.0 * mj * omega_n
    return kp, kd


def drift_test(model: ChainModel, delta_plant: ParamVector, delta_ident: ParamVector,
               targets: list[np.ndarray], cfg: SimConfig,
               pd: PDConfig | None = None,
               with_bounds: bool = True,
               bound_joints: tuple[int, ...] = (0, 1, 2),
               gc_include_stiffness: bool = False,
               gc_disabled: bool = False,
               keep_logs: bool = False) -> list[DriftReport]:
    """PD settle, 5 s open-loop gravity hold, drift flagging, LB/UB brackets."""
    pd = pd or PDConfig()
    return [
        _run_single_pose(model, delta_plant, delta_ident, np.asarray(t, dtype=float),
                         cfg, pd, with_bounds, bound_joints, gc_include_stiffness,
                         gc_disabled, keep_logs)
        for t in targets
    ]


def _run_single_pose(model, delta_plant, delta_ident, target, cfg, pd,
                     with_bounds, bound_joints, gc_include_stiffness, gc_disabled,
                     keep_logs):
    nan7 = np.full(N_JOINTS, np.nan)
    pose = rcm_pose(model, target)

    kp, kd = pd_gains(model, delta_plant, target, pd.omega_n)
    pd_cfg = cfg.replace(dt=pd.dt, duration=pd.timeout, log_stride=1)
    x0 = RobotState(target + pd.start_offset * np.ones(N_JOINTS))
    log_a = simulate(model, delta_plant, PDController(target, kp, kd), x0, pd_cfg,
                     allow_early_exit=True)
    settled = log_a.reached_fixed_point or _quiet_tail(log_a, pd.settle_window, pd.dt)
    if not settled:
        return DriftReport(target, pose, False, False, nan7, nan7, nan7, nan7,
                           nan7, nan7, message="PD phase failed to settle")
    n_win = max(1, int(round(pd.settle_window / pd.dt)))
    pd_pos_err = np.abs(log_a.q[-n_win:] - target[None, :]).mean(axis=0)
    pd_tau = log_a.tau_cmd[-n_win:].mean(axis=0)

    q_switch = log_a.q[-1].copy()
    if gc_disabled:
        gc_controller = ZeroController()
    else:
        gc_controller = GravityController(delta_ident, gc_include_stiffness)

    hold_cfg = cfg.replace(duration=5.0)
    log_b = simulate(model, delta_plant, gc_controller,
                     RobotState(q_switch, log_a.qd[-1]), hold_cfg,
                     allow_early_exit=True)
    gc_pos_err = np.abs(log_b.q - q_switch[None, :]).max(axis=0)
    gc_tau = log_b.tau_cmd.mean(axis=0)
    drifted = detect_drift(log_b.q, q_switch)

    lb = nan7.copy()
    ub = nan7.copy()
    if with_bounds:
        for j in bound_joints:
            lb[j], ub[j] = lb_ub_search(model, delta_plant, q_switch, j, cfg)
    return DriftReport(target, pose, True, drifted, pd_pos_err, gc_pos_err,
                       pd_tau, gc_tau, lb, ub,
                       gc_log=log_b if keep_logs else None)


def _quiet_tail(log: SimLog, window: float, dt: float) -> bool:
    n = max(1, int(round(window / dt)))
    if len(log.t) < n:
        return False
    return bool(np.all(np.abs(log.qd[-n:]) < 1e-6))


# ---------------------------------------------------------------------------
# Non-drift torque bracket

def lb_ub_search(model: ChainModel, delta_plant: ParamVector, q_hold: np.ndarray,
                 joint: int, cfg: SimConfig, resolution: float = 1e-3,
                 max_range: float = 1e3) -> tuple[float, float]:
    """Smallest/largest-magnitude constant efforts that hold ``joint`` for 5 s.

    All other joints are held by ideal clamps. The returned pair follows the
    reporting convention LB = bound nearer zero, UB = farther. The bracket
    always contains the plant's gravity effort at the pose.
    """
    q_hold = np.asarray(q_hold, dtype=float)
    clamp = np.ones(N_JOINTS, dtype=bool)
    clamp[joint] = False
    plant = _Plant(model, delta_plant, cfg)
    u0 = plant.hold_command(q_hold)[joint]
    thr = np.full(N_JOINTS, np.inf)
    thr[joint] = DRIFT_THRESHOLDS[joint]
    probe_cfg = cfg.replace(duration=5.0, log_stride=max(1, int(round(0.01 / cfg.dt))))

    def no_drift(u: float) -> bool:
        cmd = np.zeros(N_JOINTS)
        cmd[joint] = u
        log = simulate(model, delta_plant, ConstantController(cmd),
                       RobotState(q_hold), probe_cfg, clamp=clamp,
                       monitor=(q_hold, thr), allow_early_exit=True)
        return not (log.stopped_early
                    or abs(log.q[:, joint] - q_hold[joint]).max() > thr[joint])

    if not no_drift(u0):
        # no stiction to speak of: bracket collapses onto the hold command
        return u0, u0

    def expand(direction: float) -> float:
        lo = u0
        step = max(8.0 * resolution, 0.25)
        hi = u0 + direction * step
        while no_drift(hi):
            lo = hi
            step *= 2.0
            hi = u0 + direction * step
            if abs(hi - u0) > max_range:
                return lo
        while abs(hi - lo) > resolution:
            mid = 0.5 * (lo + hi)
            if no_drift(mid):
                lo = mid
            else:
                hi = mid
        return lo

    e_plus = expand(1.0)
    e_minus = expand(-1.0)
    if abs(e_minus) <= abs(e_plus):
        return e_minus, e_plus
    return e_plus, e_minus
