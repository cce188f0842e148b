"""Forward kinematics and coupling-aware frame derivatives.

The model's frames form a forest; every frame coordinate is affine in the 7
actuated joints, so all passes here take the coupling into account. The
heavy lifting is done by batched passes over a compiled chain: arrays are
shaped ``(n_frames, n_states, ...)`` so that stacking a regressor over a
trajectory or evaluating many accelerations at one configuration costs a
single sweep. All passes are complex-step safe (no abs/sign/branching on
values), which the dynamics oracle exploits for machine-precision
derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import (
    FIXED, LUMPED, N_JOINTS, PRISMATIC, REVOLUTE, ROOT_FRAME, ChainModel, FrameSpec,
)

_KIND_CODE = {FIXED: 0, REVOLUTE: 1, PRISMATIC: 2}


@dataclass
class RobotState:
    """Actuated joint positions/velocities/accelerations (7-vectors)."""

    q: np.ndarray
    qd: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    qdd: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        self.qdd = np.asarray(self.qdd, dtype=float)
        for name, v in (("q", self.q), ("qd", self.qd), ("qdd", self.qdd)):
            if v.shape != (N_JOINTS,):
                raise ContractError(f"{name} must be a 7-vector")
            if not np.all(np.isfinite(v)):
                raise ContractError(f"{name} has non-finite entries")


@dataclass
class HomTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "HomTransform") -> "HomTransform":
        return HomTransform(self.rotation @ other.rotation,
                            self.translation + self.rotation @ other.translation)

    def inverse(self) -> "HomTransform":
        Rt = self.rotation.T
        return HomTransform(Rt, -Rt @ self.translation)


def rotx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def mdh_transform(a_prev: float, alpha_prev: float, d: float, theta: float) -> HomTransform:
    """RotX(alpha_prev) . TransX(a_prev) . RotZ(theta) . TransZ(d)."""
    R = rotx(alpha_prev) @ rotz(theta)
    p = rotx(alpha_prev) @ np.array([a_prev, 0.0, d])
    return HomTransform(R, p)


# ---------------------------------------------------------------------------
# Compiled chain + batched passes

class CompiledChain:
    """Per-spatial-frame constants in topological order, ready for batched FK."""

    def __init__(self, model: ChainModel):
        spatial = [f for f in model.frames if f.is_spatial]
        order = _topo_order(spatial)
        self.ids: list[str] = [f.id for f in order]
        self.index = {fid: i for i, fid in enumerate(self.ids)}
        n = len(order)
        self.n = n
        self.parent = np.full(n, -1, dtype=int)
        self.kind = np.zeros(n, dtype=int)
        self.R_pre = np.zeros((n, 3, 3))
        self.t_const = np.zeros((n, 3))
        self.u_d = np.zeros((n, 3))
        self.coupling = np.zeros((n, N_JOINTS))
        for i, f in enumerate(order):
            if f.ref != ROOT_FRAME:
                self.parent[i] = self.index[f.ref]
            self.kind[i] = _KIND_CODE[f.joint_kind]
            self.R_pre[i] = rotx(f.alpha_prev) @ rotz(f.theta_const)
            self.t_const[i] = rotx(f.alpha_prev) @ np.array([f.a_prev, 0.0, f.d_const])
            self.u_d[i] = rotx(f.alpha_prev) @ np.array([0.0, 0.0, 1.0])
            self.coupling[i] = f.coupling_row
        self.root_rotation = np.eye(3)
        if model.handedness == "left":
            self.root_rotation = np.diag([1.0, -1.0, 1.0])
        self.inertial = np.array([f.has_link_inertia for f in order])
        # ancestor_mask[i, j] True if frame j is on the path root..i (inclusive)
        self.ancestor_mask = np.zeros((n, n), dtype=bool)
        for i in range(n):
            j = i
            while j >= 0:
                self.ancestor_mask[i, j] = True
                j = self.parent[j]
        self.children: list[list[int]] = [[] for _ in range(n)]
        for i in range(n):
            if self.parent[i] >= 0:
                self.children[self.parent[i]].append(i)


def _topo_order(frames: list[FrameSpec]) -> list[FrameSpec]:
    by_id = {f.id: f for f in frames}
    order: list[FrameSpec] = []
    state: dict[str, int] = {}

    def visit(f: FrameSpec):
        if state.get(f.id) == 2:
            return
        if state.get(f.id) == 1:
            raise ConfigError(f"frame forest has a cycle through {f.id!r}")
        state[f.id] = 1
        if f.ref != ROOT_FRAME:
            if f.ref not in by_id:
                raise ConfigError(f"frame {f.id!r} references missing frame {f.ref!r}")
            visit(by_id[f.ref])
        state[f.id] = 2
        order.append(f)

    for f in frames:
        visit(f)
    return order


def compiled(model: ChainModel) -> CompiledChain:
    cc = model.__dict__.get("_compiled")
    if cc is None:
        cc = CompiledChain(model)
        model.__dict__["_compiled"] = cc
    return cc


def fk_pass(cc: CompiledChain, Q: np.ndarray):
    """Batched FK. ``Q``: (m, 7) -> R (n, m, 3, 3), p (n, m, 3)."""
    Q = np.atleast_2d(Q)
    m = Q.shape[0]
    dt = np.result_type(Q.dtype, float)
    R = np.zeros((cc.n, m, 3, 3), dtype=dt)
    p = np.zeros((cc.n, m, 3), dtype=dt)
    coords = Q @ cc.coupling.T  # (m, n) variable part
    for i in range(cc.n):
        par = cc.parent[i]
        Rp = cc.root_rotation[None] if par < 0 else R[par]
        pp = 0.0 if par < 0 else p[par]
        t_loc = np.broadcast_to(cc.t_const[i], (m, 3))
        if cc.kind[i] == 1:  # revolute: R_pre @ RotZ(theta_var)
            th = coords[:, i]
            c, s = np.cos(th), np.sin(th)
            Rz = np.zeros((m, 3, 3), dtype=dt)
            Rz[:, 0, 0] = c
            Rz[:, 0, 1] = -s
            Rz[:, 1, 0] = s
            Rz[:, 1, 1] = c
            Rz[:, 2, 2] = 1.0
            R_loc = cc.R_pre[i][None] @ Rz
        else:
            R_loc = np.broadcast_to(cc.R_pre[i], (m, 3, 3))
            if cc.kind[i] == 2:  # prismatic: slide along u_d
                t_loc = t_loc + coords[:, i, None] * cc.u_d[i]
        R[i] = Rp @ R_loc
        p[i] = pp + np.einsum("mij,mj->mi", Rp if par >= 0 else np.broadcast_to(Rp, (m, 3, 3)), t_loc)
    return R, p


def vel_acc_pass(cc: CompiledChain, R, p, Qd, Qdd, a_root=None):
    """Spatial velocities/accelerations of the frame origins (world axes).

    Returns (w, v, al, a), each (n, m, 3). ``a_root`` biases the root linear
    acceleration (pass ``-gravity`` for gravity-biased dynamics passes).
    """
    Qd = np.atleast_2d(Qd)
    Qdd = np.atleast_2d(Qdd)
    m = max(Qd.shape[0], Qdd.shape[0], R.shape[1])
    dt = np.result_type(Qd.dtype, Qdd.dtype, R.dtype, float)
    w = np.zeros((cc.n, m, 3), dtype=dt)
    v = np.zeros((cc.n, m, 3), dtype=dt)
    al = np.zeros((cc.n, m, 3), dtype=dt)
    a = np.zeros((cc.n, m, 3), dtype=dt)
    rates = Qd @ cc.coupling.T
    accs = Qdd @ cc.coupling.T
    zero3 = np.zeros((m, 3), dtype=dt)
    a0 = zero3 if a_root is None else np.broadcast_to(np.asarray(a_root, dtype=dt), (m, 3))
    for i in range(cc.n):
        par = cc.parent[i]
        wp = zero3 if par < 0 else w[par]
        vp = zero3 if par < 0 else v[par]
        alp = zero3 if par < 0 else al[par]
        ap = a0 if par < 0 else a[par]
        dp = p[i] - (0.0 if par < 0 else p[par])
        z = R[i, :, :, 2]
        w_x_dp = np.cross(wp, dp)
        base_v = vp + w_x_dp
        base_a = ap + np.cross(alp, dp) + np.cross(wp, w_x_dp)
        if cc.kind[i] == 1:
            rt = rates[:, i, None]
            ac = accs[:, i, None]
            w[i] = wp + z * rt
            v[i] = base_v
            al[i] = alp + z * ac + np.cross(wp, z) * rt
            a[i] = base_a
        elif cc.kind[i] == 2:
            rt = rates[:, i, None]
            ac = accs[:, i, None]
            w[i] = wp
            v[i] = base_v + z * rt
            al[i] = alp
            a[i] = base_a + 2.0 * np.cross(wp, z) * rt + z * ac
        else:
            w[i] = wp
            v[i] = base_v
            al[i] = alp
            a[i] = base_a
    return w, v, al, a


# ---------------------------------------------------------------------------
# Public single-state operations

def frame_coordinates(model: ChainModel, q: np.ndarray) -> dict[str, float]:
    """Per-frame scalar coordinate (theta for revolute/lumped, d for prismatic,
    the constant theta for fixed frames)."""
    q = np.asarray(q, dtype=float)
    out: dict[str, float] = {}
    for f in model.frames:
        var = float(f.coupling_row @ q)
        if f.joint_kind == PRISMATIC:
            out[f.id] = f.d_const + var
        elif f.joint_kind == LUMPED:
            out[f.id] = f.theta_const + var
        elif f.joint_kind == REVOLUTE:
            out[f.id] = f.theta_const + var
        else:
            out[f.id] = f.theta_const
    return out


def forward_kinematics(model: ChainModel, q: np.ndarray) -> dict[str, HomTransform]:
    """Frame-0-based transforms for every spatial frame, plus the fixed
    reporting frame under its ``rcm_frame`` name."""
    cc = compiled(model)
    R, p = fk_pass(cc, np.asarray(q, dtype=float)[None, :])
    out = {fid: HomTransform(R[i, 0], p[i, 0]) for i, fid in enumerate(cc.ids)}
    out[model.rcm_frame] = HomTransform(model.rcm_rotation.copy(), model.rcm_origin.copy())
    return out


@dataclass
class FrameMotion:
    omega: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    a: np.ndarray


def frame_kinematics_derivatives(model: ChainModel, state: RobotState,
                                 gravity_biased: bool = False) -> dict[str, FrameMotion]:
    """Angular/linear velocity and acceleration of each spatial frame origin."""
    cc = compiled(model)
    R, p = fk_pass(cc, state.q[None, :])
    a_root = -model.gravity if gravity_biased else None
    w, v, al, a = vel_acc_pass(cc, R, p, state.qd[None, :], state.qdd[None, :], a_root=a_root)
    return {fid: FrameMotion(w[i, 0], v[i, 0], al[i, 0], a[i, 0]) for i, fid in enumerate(cc.ids)}


def com_positions_linear(model: ChainModel, q: np.ndarray) -> dict[str, HomTransform]:
    """Affine map from a link's local CoM to its frame-0 position, for every
    link that carries inertial parameters: p = rotation @ c + translation."""
    fk = forward_kinematics(model, q)
    return {f.id: fk[f.id] for f in model.frames if f.has_link_inertia}


def _chain_transform_at_zero(frames: list[FrameSpec], target: str, handedness: str):
    """FK of one frame at q = 0 from a bare frame list (no ChainModel yet)."""
    by_id = {f.id: f for f in frames}
    chain = []
    cur = by_id[target]
    while True:
        chain.append(cur)
        if cur.ref == ROOT_FRAME:
            break
        cur = by_id[cur.ref]
    R = np.diag([1.0, -1.0, 1.0]) if handedness == "left" else np.eye(3)
    p = np.zeros(3)
    for f in reversed(chain):
        T = mdh_transform(f.a_prev, f.alpha_prev, f.d_const, f.theta_const)
        p = p + R @ T.translation
        R = R @ T.rotation
    return R, p


# ---------------------------------------------------------------------------
# Pose reporting (mm / extrinsic XYZ Euler degrees)

@dataclass
class Pose6:
    """Task-space pose: position in mm, extrinsic XYZ Euler angles in deg."""

    x: float
    y: float
    z: float
    rx: float
    ry: float
    rz: float

    def to_csv_row(self) -> str:
        return ",".join(_fmt(v) for v in (self.x, self.y, self.z, self.rx, self.ry, self.rz))

    @staticmethod
    def csv_header() -> str:
        return "x_mm,y_mm,z_mm,rx_deg,ry_deg,rz_deg"

    @classmethod
    def from_transform(cls, T: HomTransform) -> "Pose6":
        rx, ry, rz = matrix_to_euler_xyz(T.rotation)
        p = T.translation * 1000.0
        return cls(p[0], p[1], p[2], math.degrees(rx), math.degrees(ry), math.degrees(rz))

    def to_transform(self) -> HomTransform:
        R = euler_xyz_to_matrix(math.radians(self.rx), math.radians(self.ry), math.radians(self.rz))
        return HomTransform(R, np.array([self.x, self.y, self.z]) / 1000.0)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def euler_xyz_to_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic XYZ: rotate about world x, then world y, then world z."""
    cz, sz = math.cos(rz), math.sin(rz)
    cy, sy = math.cos(ry), math.sin(ry)
    cx, sx = math.cos(rx), math.sin(rx)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
    Ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    Rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def matrix_to_euler_xyz(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_xyz_to_matrix`; angles in (-pi, pi].

    At gimbal lock (|ry| = 90 deg) rx is set to 0 and the remaining rotation
    is folded into rz, so output stays deterministic.
    """
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, float(sy)))
    ry = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        rx = math.atan2(R[2, 1], R[2, 2])
        rz = math.atan2(R[1, 0], R[0, 0])
    else:
        rx = 0.0
        # R = Rz(rz) Ry(+-90): R[0,1] = -sin(rz mp rx)..., fold into rz
        rz = math.atan2(-R[0, 1], R[1, 1])
    return (_wrap_pi(rx), _wrap_pi(ry), _wrap_pi(rz))


def _wrap_pi(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    if a == -math.pi:
        a = math.pi
    return a


def rcm_pose(model: ChainModel, q: np.ndarray) -> Pose6:
    """Tool-tip pose expressed in the fixed remote-center frame (mm/deg)."""
    if not model.rcm_frame:
        raise ConfigError("model has no rcm_frame configured")
    fk = forward_kinematics(model, q)
    if model.tip_frame not in fk:
        raise ConfigError(f"tip frame {model.tip_frame!r} not in model")
    T_rcm = HomTransform(model.rcm_rotation, model.rcm_origin)
    T_tip = fk[model.tip_frame]
    return Pose6.from_transform(T_rcm.inverse().compose(T_tip))
