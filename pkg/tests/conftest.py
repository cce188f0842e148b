import math

import numpy as np
import pytest

from psmdyn.dynamics import ParamVector
from psmdyn.kinematics import RobotState
from psmdyn.model import ChainModel, FrameSpec, build_psm_preset, param_layout

# Plausible placeholder lengths (meters). The parallelogram closes:
# l_2L2 == l_2H0 and l_2H1 == l_1H, so the remote center is a fixed point.
EXAMPLE_LENGTHS = dict(
    l_1H=0.18, l_1L=0.21, l_2L0=0.10, l_2H0=0.52, l_2L1=0.40, l_2H1=0.18,
    l_2L2=0.52, l_3L=0.04, l_3H=0.20, l_RCC=0.38, l_tool=0.48, l_p2y=0.009,
)


@pytest.fixture(scope="session")
def psm() -> ChainModel:
    return build_psm_preset(EXAMPLE_LENGTHS)


@pytest.fixture(scope="session")
def layout(psm):
    return param_layout(psm)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def random_state(rng, scale_q=0.6, scale_v=1.0, scale_a=2.0) -> RobotState:
    q = rng.uniform(-scale_q, scale_q, 7)
    q[2] = rng.uniform(0.02, 0.22)
    return RobotState(q, rng.uniform(-scale_v, scale_v, 7),
                      rng.uniform(-scale_a, scale_a, 7))


def feasible_delta(model, rng, fc_range=(0.15, 0.5), fo_range=(-0.02, 0.02),
                   ks=0.05, mode="gravity") -> ParamVector:
    """Random ground truth satisfying every physical-consistency constraint."""
    lay = param_layout(model, mode)
    vals = np.zeros(lay.dim)
    for f in model.frames:
        if f.has_link_inertia:
            idx = lay.frame_slice(f.id, "inertial")
            m = rng.uniform(0.5, 5.0)
            w = rng.dirichlet(np.ones(len(f.hull_vertices)))
            com = 0.6 * (w @ f.hull_vertices)
            vals[idx[0]] = m
            vals[idx[1]:idx[1] + 3] = m * com
            if mode == "full":
                # consistent point-mass second moments about the frame origin
                I = m * (float(com @ com) * np.eye(3) - np.outer(com, com)) + 1e-4 * np.eye(3)
                vals[idx[4]:idx[9] + 1] = [I[0, 0], I[0, 1], I[0, 2], I[1, 1], I[1, 2], I[2, 2]]
        if f.has_friction:
            idx = lay.frame_slice(f.id, "friction")
            vals[idx[0]] = rng.uniform(*fc_range)
            vals[idx[1]] = rng.uniform(0.05, 0.3)
            vals[idx[2]] = rng.uniform(*fo_range)
        if f.has_motor_inertia:
            vals[lay.frame_slice(f.id, "motor")[0]] = rng.uniform(1e-4, 1e-2)
        if f.has_stiffness:
            vals[lay.frame_slice(f.id, "stiffness")[0]] = ks
    return ParamVector(lay, vals)


def pendulum_model(Fc=0.0, Fv=0.0, Fo=0.0, gravity=(0.0, 0.0, -9.81)) -> ChainModel:
    """Single revolute link: frame z tilted so the link swings in a vertical
    plane; local CoM along +x gives the classic point-mass pendulum."""
    hull = 0.5 * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                           [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    fr = FrameSpec(
        id="1", ref="0", a_prev=0.0, alpha_prev=math.pi / 2, d_const=0.0,
        theta_const=math.pi / 2, joint_kind="revolute",
        coupling_row=np.eye(7)[0], has_link_inertia=True,
        has_friction=(Fc != 0 or Fv != 0 or Fo != 0), hull_vertices=hull)
    return ChainModel(frames=[fr], lengths={}, motor_coupling=np.zeros((2, 7)),
                      gravity=np.asarray(gravity, dtype=float))


def pendulum_delta(model, m=2.0, ell=0.3, Fc=0.0, Fv=0.0, Fo=0.0) -> ParamVector:
    lay = param_layout(model)
    vals = [m, m * ell, 0.0, 0.0]
    if model.frames[0].has_friction:
        vals += [Fc, Fv, Fo]
    return ParamVector(lay, np.array(vals))


CLAMP_REST = np.array([False] + [True] * 6)
