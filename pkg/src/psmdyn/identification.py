"""Dataset ingestion, stacked least squares, and the constrained solve.

The identification problem minimizes ||W delta - T||^2 (+ a small Tikhonov
term that pins the structurally unidentifiable directions) subject to the
physical-consistency constraints: positive link masses, each link's center
of mass inside its convex hull, and nonnegative friction/motor/stiffness
coefficients. CoM-in-hull is encoded exactly with per-vertex weights
mu >= 0, sum(mu) = m, V' mu = first moment, which keeps the problem a QP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .dynamics import ParamVector, regressor_batch
from .errors import ConfigError, ContractError, NumericalError
from .model import ChainModel, N_JOINTS, ParamLayout, param_layout
from .qp import solve_qp

_Q_UNITS = ["rad", "rad", "m", "rad", "rad", "rad", "rad"]
_TAU_UNITS = ["N*m", "N*m", "N", "N*m", "N*m", "N*m", "N*m"]


@dataclass
class IdentDataset:
    t: np.ndarray          # (n,)
    q: np.ndarray          # (n, 7)
    tau: np.ndarray        # (n, 7)
    qd: np.ndarray | None = None
    qdd: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        n = len(self.t)
        if self.q.shape != (n, N_JOINTS) or self.tau.shape != (n, N_JOINTS):
            raise ContractError("dataset arrays must be (n, 7)")
        if np.any(np.diff(self.t) <= 0):
            raise ContractError("timestamps must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def rate(self) -> float:
        return 1.0 / float(np.mean(np.diff(self.t)))

    def check_uniform(self, jitter: float = 0.01):
        dt = np.diff(self.t)
        if dt.size and (dt.max() - dt.min()) > jitter * dt.mean():
            raise ContractError("timestamps are not uniform within 1%")


def preprocess(raw: IdentDataset, cutoff_hz: float,
               use_provided_derivatives: bool = False) -> IdentDataset:
    """Zero-phase low-pass filter, central-difference derivatives, end trim.

    With ``use_provided_derivatives`` the dataset must already carry qd/qdd
    (e.g. simulated data) and is passed through untouched.
    """
    if raw.n < 50:
        raise ContractError(f"need at least 50 samples, got {raw.n}")
    raw.check_uniform()
    if use_provided_derivatives:
        if raw.qd is None or raw.qdd is None:
            raise ContractError("dataset has no provided derivatives")
        meta = dict(raw.meta, preprocessed=True, derivatives="provided")
        return IdentDataset(raw.t, raw.q, raw.tau, raw.qd, raw.qdd, meta)

    fs = raw.rate
    if cutoff_hz >= fs / 2:
        raise ContractError("cutoff must be below the Nyquist rate")
    b, a = scipy.signal.butter(2, cutoff_hz / (fs / 2))
    q_f = scipy.signal.filtfilt(b, a, raw.q, axis=0)
    tau_f = scipy.signal.filtfilt(b, a, raw.tau, axis=0)
    dt = 1.0 / fs
    qd = np.gradient(q_f, dt, axis=0)
    qdd = np.gradient(qd, dt, axis=0)
    trim = int(np.ceil(fs / cutoff_hz))
    sl = slice(trim, raw.n - trim)
    meta = dict(raw.meta, preprocessed=True, derivatives="estimated",
                cutoff_hz=cutoff_hz, trim=trim)
    return IdentDataset(raw.t[sl], q_f[sl], tau_f[sl], qd[sl], qdd[sl], meta)


def assemble(model: ChainModel, data: IdentDataset, mode: str = "gravity"):
    """Stack regressor blocks and measured torques: W (7n, p), T (7n,)."""
    if data.qd is None or data.qdd is None:
        raise ContractError("dataset must be preprocessed (missing derivatives)")
    H = regressor_batch(model, data.q, data.qd, data.qdd, mode)
    W = H.reshape(-1, H.shape[2])
    T = data.tau.reshape(-1)
    return W, T


# ---------------------------------------------------------------------------
# Constrained solve

@dataclass
class IdentOptions:
    lambda_rel: float = 1e-8     # Tikhonov weight relative to sigma_1(W)^2
    m_min: float = 1e-6          # kg
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    max_iter: int = 200_000
    rank_threshold: float = 1e-8


@dataclass
class IdentResult:
    delta: ParamVector
    residual_rms: np.ndarray      # per joint
    cond_wb: float
    rank: int
    active_constraints: list[str]
    iterations: int
    kkt_residual: float
    multipliers: dict[str, float]
    options: IdentOptions
    basis: np.ndarray


def _constraint_system(layout: ParamLayout, hulls: dict[str, np.ndarray],
                       m_min: float):
    """Rows of l <= A x <= u over x = [delta; mu], plus row names."""
    p = layout.dim
    inertial_frames = sorted({e.frame_id for e in layout.entries if e.group == "inertial"},
                             key=lambda fid: layout.frame_slice(fid, "inertial")[0])
    mu_slices: dict[str, slice] = {}
    n_mu = 0
    for fid in inertial_frames:
        names = {layout.entries[i].name for i in layout.frame_slice(fid, "inertial")}
        if {"m", "mcx", "mcy", "mcz"} <= names:
            if fid not in hulls:
                raise ConfigError(f"no hull vertices supplied for link {fid!r}")
            V = np.asarray(hulls[fid], dtype=float).reshape(-1, 3)
            if V.shape[0] == 0:
                raise ConfigError(f"degenerate hull for link {fid!r}")
            mu_slices[fid] = slice(p + n_mu, p + n_mu + V.shape[0])
            n_mu += V.shape[0]
    nx = p + n_mu

    rows, lo, hi, names_out = [], [], [], []

    def add(row, lb, ub, name):
        rows.append(row)
        lo.append(lb)
        hi.append(ub)
        names_out.append(name)

    for fid in inertial_frames:
        idx = layout.frame_slice(fid, "inertial")
        by_name = {layout.entries[i].name: i for i in idx}
        if "m" in by_name:
            r = np.zeros(nx)
            r[by_name["m"]] = 1.0
            add(r, m_min, np.inf, f"{fid}.m>=m_min")
        if fid in mu_slices:
            V = np.asarray(hulls[fid], dtype=float).reshape(-1, 3)
            sl = mu_slices[fid]
            for k, comp in enumerate(("mcx", "mcy", "mcz")):
                r = np.zeros(nx)
                r[by_name[comp]] = 1.0
                r[sl] = -V[:, k]
                add(r, 0.0, 0.0, f"{fid}.hull.{comp}")
            r = np.zeros(nx)
            r[by_name["m"]] = 1.0
            r[sl] = -1.0
            add(r, 0.0, 0.0, f"{fid}.hull.mass")
            for vtx in range(V.shape[0]):
                r = np.zeros(nx)
                r[sl.start + vtx] = 1.0
                add(r, 0.0, np.inf, f"{fid}.hull.mu{vtx}>=0")

    for i, e in enumerate(layout.entries):
        if (e.group == "friction" and e.name in ("Fc", "Fv")) \
                or e.group in ("motor", "stiffness"):
            r = np.zeros(nx)
            r[i] = 1.0
            add(r, 0.0, np.inf, f"{e.frame_id}.{e.name}>=0")

    A = np.vstack(rows) if rows else np.zeros((0, nx))
    return A, np.array(lo), np.array(hi), names_out, nx


def solve_constrained(W: np.ndarray, T: np.ndarray, layout: ParamLayout,
                      hulls: dict[str, np.ndarray],
                      options: IdentOptions | None = None) -> IdentResult:
    """Physically-consistent least squares as a convex QP."""
    options = options or IdentOptions()
    W = np.asarray(W, dtype=float)
    T = np.asarray(T, dtype=float)
    p = layout.dim
    if W.shape[1] != p or W.shape[0] != T.shape[0]:
        raise ContractError("W/T shapes inconsistent with layout")

    sv = np.linalg.svd(W, compute_uv=False)
    sigma1 = sv[0] if sv.size else 1.0
    lam = options.lambda_rel * sigma1 ** 2
    rank = int(np.sum(sv > sigma1 * options.rank_threshold))
    _, _, Vt = np.linalg.svd(W, full_matrices=False)
    basis = Vt[:rank].T

    A, lo, hi, names, nx = _constraint_system(layout, hulls, options.m_min)
    P = np.zeros((nx, nx))
    P[:p, :p] = 2.0 * (W.T @ W + lam * np.eye(p))
    # tiny curvature on hull weights keeps the QP strictly convex; it only
    # selects among equivalent vertex weightings
    P[p:, p:] = 2.0 * max(lam, 1e-12 * sigma1 ** 2) * np.eye(nx - p)
    qv = np.zeros(nx)
    qv[:p] = -2.0 * (W.T @ T)

    try:
        res = solve_qp(P, qv, A, lo, hi, eps_abs=options.eps_abs,
                       eps_rel=options.eps_rel, max_iter=options.max_iter)
    except NumericalError as exc:
        err = NumericalError(f"identification QP failed: {exc}")
        best = getattr(exc, "best_iterate", None)
        if best is not None:
            err.best_delta = ParamVector(layout, best.x[:p])
        raise err from exc

    delta = ParamVector(layout, res.x[:p])
    resid = W @ delta.values - T
    if resid.size % N_JOINTS == 0:
        rms = np.sqrt(np.mean(resid.reshape(-1, N_JOINTS) ** 2, axis=0))
    else:
        rms = np.array([np.sqrt(np.mean(resid ** 2))])
    inequality = (hi - lo) >= 1e-12
    active = [names[i] for i in range(len(names))
              if inequality[i] and (res.active_lower[i] or res.active_upper[i])]
    # report multipliers in the mu >= 0 convention for one-sided rows
    mult = {names[i]: float(-res.y[i] if np.isinf(hi[i]) else res.y[i])
            for i in range(len(names)) if abs(res.y[i]) > 1e-12}
    cond_wb = float(sv[0] / sv[rank - 1]) if rank else np.inf
    return IdentResult(delta=delta, residual_rms=rms, cond_wb=cond_wb, rank=rank,
                       active_constraints=active, iterations=res.iterations,
                       kkt_residual=res.kkt_residual, multipliers=mult,
                       options=options, basis=basis)


def identify(model: ChainModel, data: IdentDataset, mode: str = "gravity",
             options: IdentOptions | None = None) -> IdentResult:
    """Assemble W, T from a preprocessed dataset and run the constrained solve."""
    W, T = assemble(model, data, mode)
    hulls = {f.id: f.hull_vertices for f in model.frames if f.has_link_inertia}
    return solve_constrained(W, T, param_layout(model, mode), hulls, options)


# ---------------------------------------------------------------------------
# Independent consistency checker and cross-validation

def check_physical_consistency(model: ChainModel, delta: ParamVector,
                               m_min: float = 1e-6, tol: float = 1e-9) -> list[str]:
    """Verify the identified vector against the constraint set.

    Independent of the QP route: point-in-hull is decided by a linear
    program (scipy linprog) on the convex-combination weights.
    """
    from scipy.optimize import linprog

    lay = delta.layout
    violations: list[str] = []
    for f in model.frames:
        if f.has_link_inertia:
            idx = lay.frame_slice(f.id, "inertial")
            m = delta.values[idx[0]]
            if m < m_min - tol:
                violations.append(f"{f.id}: mass {m:.3e} below {m_min:.1e}")
                continue
            h = delta.values[idx[1:4]]
            c = h / m if m > 0 else np.zeros(3)
            V = f.hull_vertices
            if V.shape[0] == 0:
                violations.append(f"{f.id}: no hull to check against")
                continue
            # min s  s.t.  -s <= (V' w - c)_k <= s, sum w = 1, w >= 0
            nv = V.shape[0]
            c_obj = np.zeros(nv + 1)
            c_obj[-1] = 1.0
            A_ub = np.zeros((6, nv + 1))
            A_ub[:3, :nv] = V.T
            A_ub[3:, :nv] = -V.T
            A_ub[:, -1] = -1.0
            b_ub = np.concatenate([c, -c])
            A_eq = np.zeros((1, nv + 1))
            A_eq[0, :nv] = 1.0
            lp = linprog(c_obj, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                         bounds=[(0, None)] * nv + [(0, None)], method="highs")
            dist = lp.fun if lp.success else np.inf
            if dist > tol:
                violations.append(f"{f.id}: CoM {dist:.2e} outside hull")
    for i, e in enumerate(lay.entries):
        nonneg = (e.group == "friction" and e.name in ("Fc", "Fv")) \
            or e.group in ("motor", "stiffness")
        if nonneg and delta.values[i] < -tol:
            violations.append(f"{e.frame_id}.{e.name}: negative ({delta.values[i]:.3e})")
    return violations


@dataclass
class CrossValidation:
    rms: np.ndarray    # per joint
    peak: np.ndarray   # per joint


def crossvalidate(model: ChainModel, delta: ParamVector,
                  held_out: IdentDataset) -> CrossValidation:
    W, T = assemble(model, held_out, delta.layout.mode)
    err = (W @ delta.values - T).reshape(-1, N_JOINTS)
    return CrossValidation(rms=np.sqrt(np.mean(err ** 2, axis=0)),
                           peak=np.abs(err).max(axis=0))


# ---------------------------------------------------------------------------
# Dataset CSV I/O

def _expected_header(with_derivatives: bool) -> list[str]:
    cols = ["t"] + [f"q{j}" for j in range(1, 8)] + [f"tau{j}" for j in range(1, 8)]
    if with_derivatives:
        cols += [f"qd{j}" for j in range(1, 8)] + [f"qdd{j}" for j in range(1, 8)]
    return cols


def _expected_units(with_derivatives: bool) -> list[str]:
    units = ["s"] + _Q_UNITS + _TAU_UNITS
    if with_derivatives:
        units += [u + "/s" for u in _Q_UNITS] + [u + "/s^2" for u in _Q_UNITS]
    return units


def save_dataset_csv(data: IdentDataset, path) -> None:
    with_d = data.qd is not None and data.qdd is not None
    cols = _expected_header(with_d)
    units = _expected_units(with_d)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        fh.write(",".join(units) + "\n")
        for i in range(data.n):
            row = [data.t[i], *data.q[i], *data.tau[i]]
            if with_d:
                row += [*data.qd[i], *data.qdd[i]]
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def load_dataset_csv(path) -> IdentDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        units = fh.readline().strip().split(",")
        with_d = len(header) > 15
        expected = _expected_header(with_d)
        if header != expected:
            bad = next((f"column {i + 1}: got {h!r}, want {w!r}"
                        for i, (h, w) in enumerate(zip(header, expected)) if h != w),
                       f"want {len(expected)} columns, got {len(header)}")
            raise ConfigError(f"bad data CSV header ({bad})")
        if units != _expected_units(with_d):
            raise ConfigError("bad units row in data CSV")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape[1] != len(expected):
        raise ConfigError("data CSV row width does not match header")
    t = body[:, 0]
    q = body[:, 1:8]
    tau = body[:, 8:15]
    qd = body[:, 15:22] if with_d else None
    qdd = body[:, 22:29] if with_d else None
    return IdentDataset(t, q, tau, qd, qdd, meta={"source_file": str(path)})


def save_report(result: IdentResult, path) -> None:
    report = {
        "residual_rms": result.residual_rms.tolist(),
        "cond_wb": result.cond_wb,
        "rank": result.rank,
        "layout_dim": result.delta.layout.dim,
        "layout_mode": result.delta.layout.mode,
        "kkt_residual": result.kkt_residual,
        "iterations": result.iterations,
        "active_constraints": result.active_constraints,
        "multipliers": result.multipliers,
        "tolerances": {
            "eps_abs": result.options.eps_abs,
            "eps_rel": result.options.eps_rel,
            "lambda_rel": result.options.lambda_rel,
            "m_min": result.options.m_min,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
