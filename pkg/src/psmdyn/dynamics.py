"""Linear-in-parameters dynamics of the coupled frame tree.

Joint efforts are affine in the parameter vector (masses/first moments,
friction triples, motor inertias, spring stiffness):

    tau = H(q, qd, qdd) @ delta

``inverse_dynamics`` evaluates the efforts by a Newton-Euler style sweep with
numeric parameter values; ``regressor`` assembles H column-by-column from the
same frame kinematics. The two routes are independent enough that their
agreement is a real test, and both are checked against an Euler-Lagrange
oracle that only relies on forward kinematics.

In ``gravity`` layout mode each inertial link carries (m, m*cx, m*cy, m*cz)
and the model truncates the rotational energy term (second moments about the
frame origin are structurally zero); ``full`` mode adds the six second
moments. Forward simulation synthesizes point-mass second moments so the
mass matrix stays positive definite (see :func:`synthesize_full_params`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .kinematics import RobotState, compiled, fk_pass, vel_acc_pass
from .model import ChainModel, ParamLayout, param_layout
from .model import N_JOINTS

_H_STEP = 1e-200  # complex-step size; first derivatives are exact to roundoff


@dataclass
class ParamVector:
    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.dim,):
            raise ContractError(
                f"parameter vector has {self.values.shape} entries, layout needs {self.layout.dim}")

    def value(self, frame_id: str, name: str) -> float:
        return float(self.values[self.layout.index(frame_id, name)])


@dataclass
class RegressorBlock:
    H: np.ndarray
    state: RobotState


def column_names(layout: ParamLayout) -> list[str]:
    return [f"{e.frame_id}.{e.group}.{e.name}" for e in layout.entries]


def dump_regressor_csv(block: RegressorBlock, layout: ParamLayout, path) -> None:
    """Debug dump: one header row naming each column, then the 7 effort rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(column_names(layout)) + "\n")
        for row in block.H:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


# ---------------------------------------------------------------------------
# Parameter bookkeeping

_I_NAMES = ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz")


def _inertia_from_entries(vals: dict[str, float]) -> np.ndarray:
    return np.array([
        [vals["Ixx"], vals["Ixy"], vals["Ixz"]],
        [vals["Ixy"], vals["Iyy"], vals["Iyz"]],
        [vals["Ixz"], vals["Iyz"], vals["Izz"]],
    ])


class _DeltaStruct:
    """Numeric per-element views of a flat parameter vector."""

    def __init__(self, model: ChainModel, delta: ParamVector):
        cc = compiled(model)
        lay = delta.layout
        v = delta.values
        self.inertial: list[tuple[int, float, np.ndarray, np.ndarray | None]] = []
        self.friction: list[tuple[np.ndarray, float, float, float]] = []
        self.motor: list[tuple[np.ndarray, float]] = []
        self.stiffness: list[tuple[np.ndarray, float]] = []
        for f in model.frames:
            if f.has_link_inertia:
                idx = lay.frame_slice(f.id, "inertial")
                m = v[idx[0]]
                h = v[idx[1:4]]
                inertia = None
                if lay.mode == "full":
                    vals = {lay.entries[i].name: v[i] for i in idx[4:]}
                    inertia = _inertia_from_entries(vals)
                self.inertial.append((cc.index[f.id], m, h, inertia))
            if f.has_friction:
                idx = lay.frame_slice(f.id, "friction")
                self.friction.append((f.coupling_row, v[idx[0]], v[idx[1]], v[idx[2]]))
            if f.has_motor_inertia:
                idx = lay.frame_slice(f.id, "motor")
                self.motor.append((f.coupling_row, v[idx[0]]))
            if f.has_stiffness:
                idx = lay.frame_slice(f.id, "stiffness")
                self.stiffness.append((f.coupling_row, v[idx[0]]))


def _struct_for(model: ChainModel, delta: ParamVector) -> _DeltaStruct:
    """Per-(model, delta) cache; both are immutable by convention."""
    cached = delta.__dict__.get("_struct")
    if cached is None or cached[0] is not model:
        cached = (model, _DeltaStruct(model, delta))
        delta.__dict__["_struct"] = cached
    return cached[1]


def _check_layout(model: ChainModel, delta: ParamVector):
    expected = param_layout(model, delta.layout.mode)
    if expected.entries != delta.layout.entries:
        raise ContractError("parameter layout does not match model flags")


# ---------------------------------------------------------------------------
# Newton-Euler route (numeric delta)

def _rigid_torques_batch(model: ChainModel, Q, Qd, Qdd, delta: ParamVector,
                         fk=None) -> np.ndarray:
    """Rigid-body joint efforts (gravity-biased), batched: returns (m, 7).

    Covers only the inertial parameters; friction/motor/stiffness terms are
    added by :func:`inverse_dynamics`.
    """
    cc = compiled(model)
    if fk is None:
        fk = fk_pass(cc, Q)
    R, p = fk
    w, v, al, a = vel_acc_pass(cc, R, p, Qd, Qdd, a_root=-model.gravity)
    m_states = a.shape[1]
    dt = a.dtype
    struct = _struct_for(model, delta)

    F = np.zeros((cc.n, m_states, 3), dtype=dt)
    N = np.zeros((cc.n, m_states, 3), dtype=dt)
    for i, mass, h, inertia in struct.inertial:
        h_w = np.einsum("mij,j->mi", R[i], h)
        F[i] = mass * a[i] + np.cross(al[i], h_w) + np.cross(w[i], np.cross(w[i], h_w))
        N[i] = np.cross(h_w, a[i])
        if inertia is not None:
            I_w = np.einsum("mij,jk,mlk->mil", R[i], inertia, R[i])
            Iw_w = np.einsum("mij,mj->mi", I_w, w[i])
            N[i] += np.einsum("mij,mj->mi", I_w, al[i]) + np.cross(w[i], Iw_w)

    # Inward pass: accumulate child wrenches about each frame origin.
    Facc = F.copy()
    Nacc = N.copy()
    for i in reversed(range(cc.n)):
        for c in cc.children[i]:
            Facc[i] += Facc[c]
            Nacc[i] += Nacc[c] + np.cross(p[c] - p[i], Facc[c])

    tau = np.zeros((m_states, N_JOINTS), dtype=dt)
    for i in range(cc.n):
        if cc.kind[i] == 1:
            eff = np.einsum("mi,mi->m", R[i, :, :, 2], Nacc[i])
        elif cc.kind[i] == 2:
            eff = np.einsum("mi,mi->m", R[i, :, :, 2], Facc[i])
        else:
            continue
        tau += np.outer(eff, cc.coupling[i])
    return tau


def _extra_torques_batch(model: ChainModel, Q, Qd, Qdd, delta: ParamVector) -> np.ndarray:
    """Friction + motor inertia + spring efforts, batched: (m, 7)."""
    struct = _struct_for(model, delta)
    m_states = np.atleast_2d(Q).shape[0]
    tau = np.zeros((m_states, N_JOINTS))
    for c, Fc, Fv, Fo in struct.friction:
        ve = np.atleast_2d(Qd) @ c
        tau += np.outer(Fc * np.sign(ve) + Fv * ve + Fo, c)
    for c, Im in struct.motor:
        ae = np.atleast_2d(Qdd) @ c
        tau += np.outer(Im * ae, c)
    for c, Ks in struct.stiffness:
        xe = np.atleast_2d(Q) @ c
        tau += np.outer(Ks * (xe - model.spring_rest), c)
    return tau


def inverse_dynamics(model: ChainModel, state: RobotState, delta: ParamVector) -> np.ndarray:
    """Joint efforts required to realize ``state`` under parameters ``delta``."""
    _check_layout(model, delta)
    Q, Qd, Qdd = state.q[None], state.qd[None], state.qdd[None]
    tau = _rigid_torques_batch(model, Q, Qd, Qdd, delta)
    tau = tau + _extra_torques_batch(model, Q, Qd, Qdd, delta)
    return tau[0]


# ---------------------------------------------------------------------------
# Regressor route (per-column assembly)

def regressor_batch(model: ChainModel, Q, Qd, Qdd, mode: str = "gravity") -> np.ndarray:
    """Stacked regressor H for a batch of states: returns (m, 7, p)."""
    cc = compiled(model)
    lay = param_layout(model, mode)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Qd = np.atleast_2d(np.asarray(Qd, dtype=float))
    Qdd = np.atleast_2d(np.asarray(Qdd, dtype=float))
    m_states = Q.shape[0]
    R, p = fk_pass(cc, Q)
    w, v, al, a = vel_acc_pass(cc, R, p, Qd, Qdd, a_root=-model.gravity)
    H = np.zeros((m_states, N_JOINTS, lay.dim))

    col = {(e.frame_id, e.name): k for k, e in enumerate(lay.entries)}

    for f in model.frames:
        if f.has_link_inertia:
            i = cc.index[f.id]
            n_in = 4 if lay.mode == "gravity" else 10
            Fc = np.zeros((m_states, 3, n_in))
            Nc = np.zeros((m_states, 3, n_in))
            Fc[:, :, 0] = a[i]
            for k in range(3):
                u = R[i, :, :, k]
                Fc[:, :, 1 + k] = np.cross(al[i], u) + np.cross(w[i], np.cross(w[i], u))
                Nc[:, :, 1 + k] = np.cross(u, a[i])
            if lay.mode == "full":
                for k, (r_, c_) in enumerate([(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]):
                    E = np.zeros((3, 3))
                    E[r_, c_] = E[c_, r_] = 1.0
                    Iw = np.einsum("mij,jk,mlk->mil", R[i], E, R[i])
                    Nc[:, :, 4 + k] = (np.einsum("mij,mj->mi", Iw, al[i])
                                       + np.cross(w[i], np.einsum("mij,mj->mi", Iw, w[i])))
            cols = [col[(f.id, n)] for n in
                    (lay.entries[j].name for j in lay.frame_slice(f.id, "inertial"))]
            for j in range(cc.n):
                if not cc.ancestor_mask[i, j] or cc.kind[j] == 0:
                    continue
                if cc.kind[j] == 1:
                    lever = (p[i] - p[j])[:, :, None]
                    moment = Nc + np.cross(lever, Fc, axis=1)
                    eff = np.einsum("mi,mik->mk", R[j, :, :, 2], moment)
                else:
                    eff = np.einsum("mi,mik->mk", R[j, :, :, 2], Fc)
                H[:, :, cols] += cc.coupling[j][None, :, None] * eff[:, None, :]
        if f.has_friction:
            ve = Qd @ f.coupling_row
            H[:, :, col[(f.id, "Fc")]] += np.outer(np.ones(m_states), f.coupling_row) * np.sign(ve)[:, None]
            H[:, :, col[(f.id, "Fv")]] += f.coupling_row[None, :] * ve[:, None]
            H[:, :, col[(f.id, "Fo")]] += np.broadcast_to(f.coupling_row, (m_states, N_JOINTS))
        if f.has_motor_inertia:
            ae = Qdd @ f.coupling_row
            H[:, :, col[(f.id, "Im")]] += f.coupling_row[None, :] * ae[:, None]
        if f.has_stiffness:
            xe = Q @ f.coupling_row - model.spring_rest
            H[:, :, col[(f.id, "Ks")]] += f.coupling_row[None, :] * xe[:, None]
    return H


def regressor(model: ChainModel, state: RobotState, mode: str = "gravity") -> RegressorBlock:
    H = regressor_batch(model, state.q[None], state.qd[None], state.qdd[None], mode)
    return RegressorBlock(H[0], state)


def gravity_torque(model: ChainModel, q: np.ndarray, delta: ParamVector,
                   include_stiffness: bool = False) -> np.ndarray:
    """The configuration-dependent gravity effort G(q).

    Friction offsets and motor inertia never enter; the joint-4 spring is
    added only when ``include_stiffness`` is set.
    """
    _check_layout(model, delta)
    q = np.asarray(q, dtype=float)
    zero = np.zeros((1, N_JOINTS))
    tau = _rigid_torques_batch(model, q[None], zero, zero, delta)[0]
    if include_stiffness:
        struct = _struct_for(model, delta)
        for c, Ks in struct.stiffness:
            tau = tau + c * (Ks * (c @ q - model.spring_rest))
    return tau


# ---------------------------------------------------------------------------
# Mass matrix / bias terms for forward dynamics

def mass_and_bias(model: ChainModel, q: np.ndarray, qd: np.ndarray,
                  delta: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """Rigid-body M(q) (including motor inertia) and bias C(q,qd)qd + G(q).

    One batched sweep: the FK of the single configuration is broadcast over
    nine (qd, qdd) variants. Friction and spring terms are not included.
    """
    cc = compiled(model)
    q = np.asarray(q, dtype=float)
    R1, p1 = fk_pass(cc, q[None])
    R = np.broadcast_to(R1, (cc.n, 9, 3, 3))
    p = np.broadcast_to(p1, (cc.n, 9, 3))
    Qd = np.zeros((9, N_JOINTS))
    Qd[0] = qd
    Qdd = np.zeros((9, N_JOINTS))
    Qdd[2:] = np.eye(N_JOINTS)
    tau = _rigid_torques_batch(model, None, Qd, Qdd, delta, fk=(R, p))
    bias = tau[0]
    M = (tau[2:] - tau[1]).T
    struct = _struct_for(model, delta)
    for c, Im in struct.motor:
        M = M + Im * np.outer(c, c)
    return M, bias


def synthesize_full_params(model: ChainModel, delta: ParamVector,
                           reg: float = 1e-6, m_floor: float = 1e-9) -> ParamVector:
    """Lift a gravity-mode vector to full mode for simulation.

    Second moments are synthesized as the point-mass inertia about the frame
    origin for a mass at the identified CoM, plus ``reg`` on the diagonal so
    the mass matrix stays positive definite.
    """
    if delta.layout.mode == "full":
        return delta
    full = param_layout(model, "full")
    vals = np.zeros(full.dim)
    lay = delta.layout
    for k, e in enumerate(full.entries):
        if e.name in _I_NAMES:
            idx = lay.frame_slice(e.frame_id, "inertial")
            m = delta.values[idx[0]]
            h = delta.values[idx[1:4]]
            c = h / m if m > m_floor else np.zeros(3)
            I_loc = m * (float(c @ c) * np.eye(3) - np.outer(c, c)) + reg * np.eye(3)
            comp = {"Ixx": I_loc[0, 0], "Ixy": I_loc[0, 1], "Ixz": I_loc[0, 2],
                    "Iyy": I_loc[1, 1], "Iyz": I_loc[1, 2], "Izz": I_loc[2, 2]}
            vals[k] = comp[e.name]
        else:
            vals[k] = delta.values[lay.index(e.frame_id, e.name)]
    return ParamVector(full, vals)


# ---------------------------------------------------------------------------
# Euler-Lagrange oracle (forward kinematics only)

def _fk_with_jacobians(model: ChainModel, q: np.ndarray):
    """Exact frame Jacobians via complex-step differentiation of FK.

    Returns (R, p, Jv, Jw): rotations (n,3,3), origins (n,3), origin velocity
    Jacobians (n,3,7) and angular velocity Jacobians (n,3,7).
    """
    cc = compiled(model)
    h = _H_STEP
    Qc = np.repeat(q[None].astype(complex), N_JOINTS + 1, axis=0)
    Qc[1:] += 1j * h * np.eye(N_JOINTS)
    Rc, pc = fk_pass(cc, Qc)
    R = Rc[:, 0].real
    p = pc[:, 0].real
    Jv = pc[:, 1:].imag.transpose(0, 2, 1) / h  # (n, 3, 7)
    dR = Rc[:, 1:].imag / h  # (n, 7, 3, 3)
    S = np.einsum("nkij,nlj->nkil", dR, R)  # dR @ R^T, skew
    Jw = np.stack([S[:, :, 2, 1], S[:, :, 0, 2], S[:, :, 1, 0]], axis=1)  # (n, 3, 7)
    return R, p, Jv, Jw


def _mass_matrix_el(model: ChainModel, q: np.ndarray, struct: _DeltaStruct) -> np.ndarray:
    R, p, Jv, Jw = _fk_with_jacobians(model, q)
    M = np.zeros((N_JOINTS, N_JOINTS))
    for i, mass, h, inertia in struct.inertial:
        h_w = R[i] @ h
        hx = np.array([[0.0, -h_w[2], h_w[1]],
                       [h_w[2], 0.0, -h_w[0]],
                       [-h_w[1], h_w[0], 0.0]])
        M += mass * Jv[i].T @ Jv[i]
        M += -Jv[i].T @ hx @ Jw[i] + Jw[i].T @ hx @ Jv[i]
        if inertia is not None:
            I_w = R[i] @ inertia @ R[i].T
            M += Jw[i].T @ I_w @ Jw[i]
    for c, Im in struct.motor:
        M += Im * np.outer(c, c)
    return M


def _potential_el(model: ChainModel, q: np.ndarray, struct: _DeltaStruct):
    """Potential energy; complex-safe in q."""
    cc = compiled(model)
    R, p = fk_pass(cc, np.atleast_2d(q))
    V = 0.0
    g = model.gravity
    for i, mass, h, inertia in struct.inertial:
        V = V - g @ (mass * p[i, 0] + R[i, 0] @ h)
    for c, Ks in struct.stiffness:
        V = V + 0.5 * Ks * (c @ q - model.spring_rest) ** 2
    return V


def kinetic_potential_energy(model: ChainModel, state: RobotState,
                             delta: ParamVector) -> tuple[float, float]:
    """(T, V) for the same dynamics model as inverse_dynamics."""
    _check_layout(model, delta)
    struct = _DeltaStruct(model, delta)
    M = _mass_matrix_el(model, state.q, struct)
    T = 0.5 * state.qd @ M @ state.qd
    V = float(_potential_el(model, state.q, struct))
    return T, V


def lagrangian_oracle(model: ChainModel, state: RobotState, delta: ParamVector,
                      eps: float = 1e-6) -> np.ndarray:
    """Joint efforts via d/dt(dL/dqd) - dL/dq, from energies only.

    Kinetic energy is evaluated through complex-step frame Jacobians (exact);
    the two remaining derivatives (dM/dt along the flow and the configuration
    gradient of the quadratic form) use real central differences with step
    ``eps``. Friction follows the same sign(0) = 0 law as inverse_dynamics.
    """
    _check_layout(model, delta)
    struct = _DeltaStruct(model, delta)
    q, qd, qdd = state.q, state.qd, state.qdd

    M = _mass_matrix_el(model, q, struct)
    Mp = _mass_matrix_el(model, q + eps * qd, struct)
    Mm = _mass_matrix_el(model, q - eps * qd, struct)
    Mdot = (Mp - Mm) / (2.0 * eps)

    dTdq = np.zeros(N_JOINTS)
    for k in range(N_JOINTS):
        e = np.zeros(N_JOINTS)
        e[k] = eps
        Tk_p = 0.5 * qd @ _mass_matrix_el(model, q + e, struct) @ qd
        Tk_m = 0.5 * qd @ _mass_matrix_el(model, q - e, struct) @ qd
        dTdq[k] = (Tk_p - Tk_m) / (2.0 * eps)

    h = _H_STEP
    dVdq = np.array([
        np.imag(_potential_el(model, q.astype(complex) + 1j * h * _unit_c(k), struct)) / h
        for k in range(N_JOINTS)
    ])

    tau = M @ qdd + Mdot @ qd - dTdq + dVdq
    for c, Fc, Fv, Fo in struct.friction:
        ve = c @ qd
        tau = tau + c * (Fc * np.sign(ve) + Fv * ve + Fo)
    return tau


def _unit_c(k: int) -> np.ndarray:
    e = np.zeros(N_JOINTS, dtype=complex)
    e[k] = 1.0
    return e


# ---------------------------------------------------------------------------
# Identifiable subspace

@dataclass
class IdentifiabilityReport:
    rank: int
    basis: np.ndarray          # (p, rank), orthonormal
    null_directions: np.ndarray  # (p, p - rank)
    singular_values: np.ndarray
    layout: ParamLayout


def base_parameter_analysis(model: ChainModel, sample_states: list[RobotState],
                            mode: str = "gravity",
                            rel_threshold: float = 1e-8) -> IdentifiabilityReport:
    """Numerical rank and identifiable-subspace basis of the stacked regressor."""
    lay = param_layout(model, mode)
    if len(sample_states) < 2 * lay.dim:
        raise ContractError(
            f"need at least {2 * lay.dim} sample states, got {len(sample_states)}")
    Q = np.stack([s.q for s in sample_states])
    Qd = np.stack([s.qd for s in sample_states])
    Qdd = np.stack([s.qdd for s in sample_states])
    H = regressor_batch(model, Q, Qd, Qdd, mode)
    W = H.reshape(-1, lay.dim)
    _, sv, Vt = np.linalg.svd(W, full_matrices=True)
    rank = int(np.sum(sv > sv[0] * rel_threshold))
    return IdentifiabilityReport(
        rank=rank,
        basis=Vt[:rank].T,
        null_directions=Vt[rank:].T,
        singular_values=sv,
        layout=lay,
    )


# ---------------------------------------------------------------------------
# Identified-parameter file I/O

def _entry_unit(model: ChainModel, frame_id: str, group: str, name: str) -> str:
    # Elements coupled only to the prismatic joint act in force units.
    f = model.frame(frame_id)
    prismatic_only = bool(np.any(f.coupling_row[2])) and not np.any(np.delete(f.coupling_row, 2))
    if group == "inertial":
        return {"m": "kg"}.get(name, "kg*m" if name.startswith("mc") else "kg*m^2")
    if group == "friction":
        base = "N" if prismatic_only else "N*m"
        return {"Fc": base, "Fv": base + "*s" if prismatic_only else "N*m*s", "Fo": base}[name]
    if group == "motor":
        return "kg*m^2"
    return "N*m/rad"


def save_params(model: ChainModel, delta: ParamVector, path) -> None:
    data = {
        "layout_mode": delta.layout.mode,
        "entries": [
            {"frame": e.frame_id, "group": e.group, "name": e.name,
             "value": float(delta.values[i]),
             "unit": _entry_unit(model, e.frame_id, e.group, e.name)}
            for i, e in enumerate(delta.layout.entries)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


def load_params(model: ChainModel, path) -> ParamVector:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    lay = param_layout(model, data["layout_mode"])
    vals = np.zeros(lay.dim)
    seen = set()
    for ent in data["entries"]:
        key = (ent["frame"], ent["name"])
        idx = lay.index(*key)
        vals[idx] = float(ent["value"])
        seen.add(idx)
    if len(seen) != lay.dim:
        missing = [f"{e.frame_id}.{e.name}" for i, e in enumerate(lay.entries) if i not in seen]
        raise ContractError(f"parameter file missing entries: {missing}")
    return ParamVector(lay, vals)
