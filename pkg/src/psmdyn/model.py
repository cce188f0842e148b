"""Declarative description of a coupled serial-tree manipulator.

A :class:`ChainModel` is a forest of MDH frames whose joint coordinates are
affine functions of the 7 actuated joints (``coordinate = coupling_row @ q +
const``), plus lumped motor/friction elements that have no spatial transform.
The built-in PSM preset transcribes the full kinematic table of the dVRK-Si
patient side manipulator, including the parallelogram coupling on joint 2,
the half-rate carriage on joint 3, and the wrist motor/relative-motion rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

N_JOINTS = 7

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"
LUMPED = "lumped"

ROOT_FRAME = "0"
RCM_FRAME = "F_RCM"

#: The 12 named link-length constants (meters) the preset requires.
LENGTH_KEYS = (
    "l_1H", "l_1L", "l_2L0", "l_2H0", "l_2L1", "l_2H1",
    "l_2L2", "l_3L", "l_3H", "l_RCC", "l_tool", "l_p2y",
)

INERTIAL_NAMES_GRAVITY = ("m", "mcx", "mcy", "mcz")
INERTIAL_NAMES_FULL = INERTIAL_NAMES_GRAVITY + ("Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz")
FRICTION_NAMES = ("Fc", "Fv", "Fo")


@dataclass
class FrameSpec:
    """One row of the kinematic table: an MDH frame or a lumped element."""

    id: str
    ref: str  # "none" for lumped elements
    a_prev: float = 0.0
    alpha_prev: float = 0.0
    d_const: float = 0.0
    theta_const: float = 0.0
    joint_kind: str = FIXED
    coupling_row: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    has_link_inertia: bool = False
    has_motor_inertia: bool = False
    has_friction: bool = False
    has_stiffness: bool = False
    hull_vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.coupling_row = np.asarray(self.coupling_row, dtype=float)
        self.hull_vertices = np.asarray(self.hull_vertices, dtype=float).reshape(-1, 3)

    @property
    def is_spatial(self) -> bool:
        return self.joint_kind != LUMPED


@dataclass
class ChainModel:
    """Immutable-by-convention model: frames, lengths, coupling, gravity.

    ``rcm_origin``/``rcm_rotation`` place the fixed task-space reporting frame
    in frame-0 coordinates; they are computed by the preset builder and kept
    as plain data so the model round-trips through JSON.
    """

    frames: list[FrameSpec]
    lengths: dict[str, float]
    motor_coupling: np.ndarray
    gravity: np.ndarray
    n_joints: int = N_JOINTS
    rcm_frame: str = RCM_FRAME
    rcm_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rcm_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    tip_frame: str = "7"
    handedness: str = "right"
    spring_rest: float = 0.0

    def __post_init__(self):
        self.motor_coupling = np.asarray(self.motor_coupling, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.rcm_origin = np.asarray(self.rcm_origin, dtype=float)
        self.rcm_rotation = np.asarray(self.rcm_rotation, dtype=float)

    def frame(self, frame_id: str) -> FrameSpec:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(frame_id)

    def frame_index(self, frame_id: str) -> int:
        for i, f in enumerate(self.frames):
            if f.id == frame_id:
                return i
        raise KeyError(frame_id)


@dataclass(frozen=True)
class LayoutEntry:
    frame_id: str
    group: str  # inertial | friction | motor | stiffness
    name: str


@dataclass
class ParamLayout:
    """Ordered map from flat parameter indices to (frame, group, name)."""

    entries: tuple[LayoutEntry, ...]
    mode: str = "gravity"

    @property
    def dim(self) -> int:
        return len(self.entries)

    def index(self, frame_id: str, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.frame_id == frame_id and e.name == name:
                return i
        raise KeyError((frame_id, name))

    def mask(self, group: str, names: tuple[str, ...] | None = None) -> np.ndarray:
        sel = np.zeros(self.dim, dtype=bool)
        for i, e in enumerate(self.entries):
            if e.group == group and (names is None or e.name in names):
                sel[i] = True
        return sel

    def frame_slice(self, frame_id: str, group: str) -> list[int]:
        return [i for i, e in enumerate(self.entries)
                if e.frame_id == frame_id and e.group == group]


def param_layout(model: ChainModel, mode: str = "gravity") -> ParamLayout:
    """Build the flat parameter layout from the model's per-frame flags."""
    if mode not in ("gravity", "full"):
        raise ConfigError(f"unknown layout mode {mode!r}")
    inertial = INERTIAL_NAMES_GRAVITY if mode == "gravity" else INERTIAL_NAMES_FULL
    entries: list[LayoutEntry] = []
    for f in model.frames:
        if f.has_link_inertia:
            entries += [LayoutEntry(f.id, "inertial", n) for n in inertial]
        if f.has_friction:
            entries += [LayoutEntry(f.id, "friction", n) for n in FRICTION_NAMES]
        if f.has_motor_inertia:
            entries.append(LayoutEntry(f.id, "motor", "Im"))
        if f.has_stiffness:
            entries.append(LayoutEntry(f.id, "stiffness", "Ks"))
    return ParamLayout(tuple(entries), mode)


def _unit(j: int) -> np.ndarray:
    row = np.zeros(N_JOINTS)
    row[j] = 1.0
    return row


def default_hulls(lengths: dict[str, float], floor: float = 0.02) -> dict[str, np.ndarray]:
    """Axis-aligned placeholder CoM boxes per inertial link.

    Half-extents are taken from the link's own length constants with a small
    floor so degenerate (zero-length) models still get a proper hull. These
    are engineering placeholders meant to be overridden by measured hulls.
    """
    L = lengths

    def box(hx, hy, hz):
        hx, hy, hz = (max(v, floor) for v in (hx, hy, hz))
        return np.array([[sx * hx, sy * hy, sz * hz]
                         for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])

    return {
        "1": box(L["l_1H"], L["l_1H"], L["l_1L"]),
        "2": box(L["l_2L0"], L["l_2H0"], L["l_2H0"] / 2),
        "2''": box(L["l_2L1"], L["l_2H1"], L["l_2H1"]),
        "2''''": box(L["l_2L2"], L["l_2L2"], L["l_2H1"]),
        "3": box(L["l_3L"], L["l_3L"], L["l_3H"] + L["l_tool"]),
    }


def build_psm_preset(lengths: dict[str, float],
                     gravity=(0.0, 0.0, -9.81),
                     motor_coupling: np.ndarray | None = None,
                     handedness: str = "right",
                     spring_rest: float = 0.0,
                     hulls: dict[str, np.ndarray] | None = None) -> ChainModel:
    """Build the 16-row PSM kinematic table as a ChainModel.

    ``lengths`` must supply all 12 named constants in meters. The derived
    offset on the insertion frame is ``l_c2 = l_2H1 - l_RCC``.

    The remote-center point is a fixed point in frame 0 only when the
    parallelogram closes, i.e. ``l_2L2 == l_2H0`` and ``l_2H1 == l_1H``; it
    then sits at ``(0, l_1L + l_2L1, 0)``. The builder stores that point and a
    fixed reporting orientation regardless; callers relying on remote-center
    invariance must supply closing lengths (the shipped example config does).
    """
    for key in LENGTH_KEYS:
        if key not in lengths:
            raise ConfigError(f"missing length key: {key}")
    extra = set(lengths) - set(LENGTH_KEYS)
    if extra:
        raise ConfigError(f"unknown length keys: {sorted(extra)}")
    L = {k: float(lengths[k]) for k in LENGTH_KEYS}
    l_c2 = L["l_2H1"] - L["l_RCC"]

    if motor_coupling is None:
        motor_coupling = np.vstack([_unit(5), _unit(6)])
    motor_coupling = np.asarray(motor_coupling, dtype=float)
    # user hulls override per frame; every other link keeps its default box
    hulls = {**default_hulls(L), **(hulls or {})}

    pi2 = math.pi / 2
    z7 = np.zeros(N_JOINTS)

    def frame(fid, ref, a, alpha, d, theta, kind, row, dL=False, Im=False, F=False, Ks=False):
        return FrameSpec(
            id=fid, ref=ref, a_prev=a, alpha_prev=alpha, d_const=d,
            theta_const=theta, joint_kind=kind, coupling_row=row,
            has_link_inertia=dL, has_motor_inertia=Im, has_friction=F,
            has_stiffness=Ks,
            hull_vertices=hulls.get(fid, np.zeros((0, 3))) if dL else np.zeros((0, 3)),
        )

    frames = [
        frame("1", "0", 0.0, pi2, 0.0, pi2, REVOLUTE, _unit(0), dL=True, F=True),
        frame("1'", "1", -L["l_1H"], -pi2, 0.0, pi2, FIXED, z7),
        frame("2", "1'", L["l_1L"], 0.0, 0.0, -pi2, REVOLUTE, _unit(1), dL=True, F=True),
        frame("2'", "2", L["l_2L0"], pi2, L["l_2H0"], 0.0, FIXED, z7),
        frame("2''", "2'", 0.0, -pi2, 0.0, pi2, REVOLUTE, -_unit(1), dL=True, F=True),
        frame("2'''", "2''", L["l_2L1"], pi2, L["l_2H1"], 0.0, FIXED, z7),
        frame("2''''", "2'''", 0.0, -pi2, 0.0, 0.0, REVOLUTE, _unit(1), dL=True, F=True),
        frame("3", "2''''", L["l_2L2"], -pi2, l_c2, 0.0, PRISMATIC, _unit(2), dL=True, F=True),
        frame("3'", "3", -L["l_3L"], 0.0, L["l_3H"], 0.0, PRISMATIC, -0.5 * _unit(2), F=True),
        frame("4", "3", 0.0, 0.0, L["l_tool"], 0.0, REVOLUTE, _unit(3), Im=True, F=True, Ks=True),
        frame("5", "4", 0.0, pi2, 0.0, pi2, REVOLUTE, _unit(4), Im=True, F=True),
        frame("6", "5", L["l_p2y"], -pi2, 0.0, pi2, REVOLUTE, _unit(5), F=True),
        frame("7", "5", L["l_p2y"], -pi2, 0.0, pi2, REVOLUTE, _unit(6), F=True),
        frame("M6", "none", 0.0, 0.0, 0.0, 0.0, LUMPED, motor_coupling[0], Im=True, F=True),
        frame("M7", "none", 0.0, 0.0, 0.0, 0.0, LUMPED, motor_coupling[1], Im=True, F=True),
        frame("F67", "none", 0.0, 0.0, 0.0, 0.0, LUMPED, _unit(6) - _unit(5), F=True),
    ]

    rcm_origin, rcm_rotation = _rcm_placement(frames, L, handedness)

    return ChainModel(
        frames=frames,
        lengths=L,
        motor_coupling=motor_coupling,
        gravity=np.asarray(gravity, dtype=float),
        rcm_origin=rcm_origin,
        rcm_rotation=rcm_rotation,
        handedness=handedness,
        spring_rest=float(spring_rest),
    )


def _rcm_placement(frames, L, handedness):
    """Fixed reporting frame: origin at the parallelogram remote center,
    z along the insertion direction at q = 0."""
    # Local import: kinematics depends on model, so defer to avoid a cycle.
    from .kinematics import _chain_transform_at_zero

    origin = np.array([0.0, L["l_1L"] + L["l_2L1"], 0.0])
    R3 = _chain_transform_at_zero(frames, "3", handedness)[0]
    z_axis = R3[:, 2]
    # Pick x as the base-frame axis least aligned with z, orthonormalized.
    seed = np.eye(3)[np.argmin(np.abs(z_axis))]
    x_axis = seed - z_axis * (seed @ z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    if handedness == "left":
        origin = np.array([1.0, -1.0, 1.0]) * origin
    return origin, np.column_stack([x_axis, y_axis, z_axis])


def coupling_matrix(model: ChainModel) -> np.ndarray:
    """Constant matrix whose row i maps q to frame i's variable coordinate."""
    return np.vstack([f.coupling_row for f in model.frames])


def validate(model: ChainModel) -> list[str]:
    """Check all structural invariants; returns one message per violation."""
    violations: list[str] = []
    ids = [f.id for f in model.frames]
    if len(set(ids)) != len(ids):
        violations.append("frames: duplicate frame ids")
    by_id = {f.id: f for f in model.frames}

    for f in model.frames:
        if f.is_spatial:
            if f.ref != ROOT_FRAME and f.ref not in by_id:
                violations.append(f"{f.id}: ref {f.ref!r} does not exist")
        if f.joint_kind == FIXED and np.any(f.coupling_row != 0.0):
            violations.append(f"{f.id}: fixed frame has nonzero coupling row")
        if f.has_link_inertia != (len(f.hull_vertices) > 0):
            violations.append(f"{f.id}: hull vertices and link-inertia flag disagree")
        if f.coupling_row.shape != (model.n_joints,):
            violations.append(f"{f.id}: coupling row has wrong arity")

    # Cycle check: walk each spatial frame to the root.
    for f in model.frames:
        if not f.is_spatial:
            continue
        seen = {f.id}
        cur = f.ref
        while cur != ROOT_FRAME:
            if cur in seen or cur not in by_id:
                violations.append(f"{f.id}: ref chain does not reach frame 0 (cycle or dangling at {cur!r})")
                break
            seen.add(cur)
            cur = by_id[cur].ref

    for key, val in model.lengths.items():
        if val < 0:
            violations.append(f"lengths[{key}]: negative length")
    gnorm = float(np.linalg.norm(model.gravity))
    if not (0.0 <= gnorm <= 20.0):
        violations.append(f"gravity: |g| = {gnorm:.3f} outside [0, 20]")
    mc = model.motor_coupling
    if mc.shape != (2, model.n_joints):
        violations.append("motor_coupling: wrong shape")
    elif np.any(mc[:, :5] != 0.0):
        violations.append("motor_coupling: nonzero outside columns 6 and 7")
    return violations


# ---------------------------------------------------------------------------
# Serialization

def model_to_dict(model: ChainModel) -> dict:
    return {
        "frames": [
            {
                "id": f.id, "ref": f.ref,
                "a_prev": f.a_prev, "alpha_prev": f.alpha_prev,
                "d_const": f.d_const, "theta_const": f.theta_const,
                "joint_kind": f.joint_kind,
                "coupling_row": f.coupling_row.tolist(),
                "flags": {
                    "link_inertia": f.has_link_inertia,
                    "motor_inertia": f.has_motor_inertia,
                    "friction": f.has_friction,
                    "stiffness": f.has_stiffness,
                },
                "hull_vertices": f.hull_vertices.tolist(),
            }
            for f in model.frames
        ],
        "lengths": dict(model.lengths),
        "motor_coupling": model.motor_coupling.tolist(),
        "gravity": model.gravity.tolist(),
        "n_joints": model.n_joints,
        "rcm_frame": model.rcm_frame,
        "rcm_origin": model.rcm_origin.tolist(),
        "rcm_rotation": model.rcm_rotation.tolist(),
        "tip_frame": model.tip_frame,
        "handedness": model.handedness,
        "spring_rest": model.spring_rest,
    }


def model_from_dict(data: dict) -> ChainModel:
    frames = [
        FrameSpec(
            id=fd["id"], ref=fd["ref"], a_prev=fd["a_prev"],
            alpha_prev=fd["alpha_prev"], d_const=fd["d_const"],
            theta_const=fd["theta_const"], joint_kind=fd["joint_kind"],
            coupling_row=np.array(fd["coupling_row"]),
            has_link_inertia=fd["flags"]["link_inertia"],
            has_motor_inertia=fd["flags"]["motor_inertia"],
            has_friction=fd["flags"]["friction"],
            has_stiffness=fd["flags"]["stiffness"],
            hull_vertices=np.array(fd["hull_vertices"]).reshape(-1, 3),
        )
        for fd in data["frames"]
    ]
    return ChainModel(
        frames=frames,
        lengths=dict(data["lengths"]),
        motor_coupling=np.array(data["motor_coupling"]),
        gravity=np.array(data["gravity"]),
        n_joints=data["n_joints"],
        rcm_frame=data["rcm_frame"],
        rcm_origin=np.array(data["rcm_origin"]),
        rcm_rotation=np.array(data["rcm_rotation"]),
        tip_frame=data["tip_frame"],
        handedness=data["handedness"],
        spring_rest=data["spring_rest"],
    )


def save_model(model: ChainModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> ChainModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# User-facing model config file (lengths in mm, converted on load)

_CONFIG_KEYS = {"lengths", "gravity", "motor_coupling", "handedness", "hulls", "spring_rest_deg"}


def load_model_config(path) -> ChainModel:
    """Build the PSM preset from a JSON config file.

    Schema (see docs/formats.md): ``lengths`` in millimeters, ``gravity`` in
    m/s^2, optional ``motor_coupling`` (2x7), ``handedness``, ``hulls``
    (mm, per frame id), ``spring_rest_deg``. Unknown keys are rejected.
    """
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "lengths" not in cfg:
        raise ConfigError("missing length key: lengths")
    lengths_m = {k: float(v) / 1000.0 for k, v in cfg["lengths"].items()}
    hulls = None
    if "hulls" in cfg:
        hulls = {k: np.asarray(v, dtype=float).reshape(-1, 3) / 1000.0
                 for k, v in cfg["hulls"].items()}
    mc = cfg.get("motor_coupling")
    if mc is not None:
        mc = np.asarray(mc, dtype=float)
    return build_psm_preset(
        lengths_m,
        gravity=cfg.get("gravity", (0.0, 0.0, -9.81)),
        motor_coupling=mc,
        handedness=cfg.get("handedness", "right"),
        spring_rest=math.radians(float(cfg.get("spring_rest_deg", 0.0))),
        hulls=hulls,
    )
