import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psmdyn.kinematics import (
    HomTransform, Pose6, RobotState, euler_xyz_to_matrix, forward_kinematics,
    frame_coordinates, frame_kinematics_derivatives, matrix_to_euler_xyz,
    mdh_transform, rcm_pose, com_positions_linear,
)

from conftest import EXAMPLE_LENGTHS, random_state

L = EXAMPLE_LENGTHS


def test_mdh_identity():
    T = mdh_transform(0, 0, 0, 0)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-15)


def test_mdh_double_quarter_turn():
    # RotX(90) . RotZ(90), frozen by hand from the product
    T = mdh_transform(0.0, math.pi / 2, 0.0, math.pi / 2)
    np.testing.assert_allclose(
        T.rotation, [[0, -1, 0], [0, 0, -1], [1, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-15)


def test_mdh_offset_row():
    T = mdh_transform(L["l_2L0"], math.pi / 2, L["l_2H0"], 0.0)
    np.testing.assert_allclose(T.rotation, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    np.testing.assert_allclose(
        T.translation, [L["l_2L0"], -L["l_2H0"], 0.0], atol=1e-15)


def test_coordinates_at_zero(psm):
    coords = frame_coordinates(psm, np.zeros(7))
    assert coords["1"] == pytest.approx(math.pi / 2)
    assert coords["2"] == pytest.approx(-math.pi / 2)
    assert coords["5"] == pytest.approx(math.pi / 2)
    assert coords["3"] == pytest.approx(L["l_2H1"] - L["l_RCC"])


def test_half_rate_carriage_coordinate(psm):
    q = np.zeros(7)
    q[2] = 0.02
    coords = frame_coordinates(psm, q)
    assert coords["3'"] == pytest.approx(L["l_3H"] - 0.01)


def test_jaw_relative_coordinate_vanishes(psm):
    for x in (-0.8, 0.0, 1.1):
        q = np.zeros(7)
        q[5] = q[6] = x
        assert frame_coordinates(psm, q)["F67"] == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_coordinates_are_affine(psm, seed):
    r = np.random.default_rng(seed)
    q1, q2 = r.normal(size=7), r.normal(size=7)
    c0 = frame_coordinates(psm, np.zeros(7))
    ca = frame_coordinates(psm, q1)
    cb = frame_coordinates(psm, q2)
    cab = frame_coordinates(psm, q1 + q2)
    for fid in c0:
        assert ca[fid] + cb[fid] - c0[fid] == pytest.approx(cab[fid], abs=1e-12)


# Independent oracle: raw table of rows (id, parent, a, alpha, d0, th0, kind,
# coupling) multiplied out with plain 4x4 products.
_TABLE = [
    ("1", "0", 0.0, math.pi / 2, 0.0, math.pi / 2, "r", (0, 1.0)),
    ("1'", "1", -L["l_1H"], -math.pi / 2, 0.0, math.pi / 2, "f", None),
    ("2", "1'", L["l_1L"], 0.0, 0.0, -math.pi / 2, "r", (1, 1.0)),
    ("2'", "2", L["l_2L0"], math.pi / 2, L["l_2H0"], 0.0, "f", None),
    ("2''", "2'", 0.0, -math.pi / 2, 0.0, math.pi / 2, "r", (1, -1.0)),
    ("2'''", "2''", L["l_2L1"], math.pi / 2, L["l_2H1"], 0.0, "f", None),
    ("2''''", "2'''", 0.0, -math.pi / 2, 0.0, 0.0, "r", (1, 1.0)),
    ("3", "2''''", L["l_2L2"], -math.pi / 2, L["l_2H1"] - L["l_RCC"], 0.0, "p", (2, 1.0)),
    ("3'", "3", -L["l_3L"], 0.0, L["l_3H"], 0.0, "p", (2, -0.5)),
    ("4", "3", 0.0, 0.0, L["l_tool"], 0.0, "r", (3, 1.0)),
    ("5", "4", 0.0, math.pi / 2, 0.0, math.pi / 2, "r", (4, 1.0)),
    ("6", "5", L["l_p2y"], -math.pi / 2, 0.0, math.pi / 2, "r", (5, 1.0)),
    ("7", "5", L["l_p2y"], -math.pi / 2, 0.0, math.pi / 2, "r", (6, 1.0)),
]


def _oracle_fk(q):
    def mat4(a, alpha, d, th):
        ca, sa = math.cos(alpha), math.sin(alpha)
        ct, s = math.cos(th), math.sin(th)
        rx = np.array([[1, 0, 0, 0], [0, ca, -sa, 0], [0, sa, ca, 0], [0, 0, 0, 1.0]])
        tx = np.eye(4)
        tx[0, 3] = a
        rz = np.array([[ct, -s, 0, 0], [s, ct, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
        tz = np.eye(4)
        tz[2, 3] = d
        return rx @ tx @ rz @ tz

    out = {"0": np.eye(4)}
    for fid, parent, a, alpha, d0, th0, kind, coup in _TABLE:
        d, th = d0, th0
        if kind == "r":
            th = th0 + coup[1] * q[coup[0]]
        elif kind == "p":
            d = d0 + coup[1] * q[coup[0]]
        out[fid] = out[parent] @ mat4(a, alpha, d, th)
    return out


def test_fk_matches_chained_products(psm, rng):
    for _ in range(10):
        q = rng.uniform(-1.0, 1.0, 7)
        fk = forward_kinematics(psm, q)
        oracle = _oracle_fk(q)
        for fid, _, *_ in _TABLE:
            np.testing.assert_allclose(fk[fid].as_matrix(), oracle[fid], atol=1e-12)


def test_rotations_orthonormal(psm, rng):
    for _ in range(20):
        fk = forward_kinematics(psm, rng.uniform(-1.5, 1.5, 7))
        for fid, T in fk.items():
            R = T.rotation
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-10
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


def test_remote_center_invariance(psm, rng):
    X = psm.rcm_origin
    for _ in range(100):
        q = rng.uniform(-0.7, 0.7, 7)
        q[2] = rng.uniform(0.0, 0.24)
        T3 = forward_kinematics(psm, q)["3"]
        d = T3.rotation[:, 2]
        r = X - T3.translation
        perp = r - d * (r @ d)
        assert np.linalg.norm(perp) < 1e-9


def test_remote_center_under_pitch_sweep(psm):
    # the remote-center point must not move as the pitch joint sweeps
    pts = []
    for q2 in np.radians([-30.0, 0.0, 30.0]):
        q = np.zeros(7)
        q[1] = q2
        q[2] = 0.1
        T3 = forward_kinematics(psm, q)["3"]
        d = T3.rotation[:, 2]
        r = psm.rcm_origin - T3.translation
        pts.append(T3.translation + d * (r @ d))
    for p in pts[1:]:
        np.testing.assert_allclose(p, pts[0], atol=1e-9)


def test_reporting_frame_is_fixed(psm, rng):
    for _ in range(5):
        fk = forward_kinematics(psm, rng.uniform(-1, 1, 7))
        np.testing.assert_array_equal(fk["F_RCM"].translation, psm.rcm_origin)
        np.testing.assert_array_equal(fk["F_RCM"].rotation, psm.rcm_rotation)


def test_pose_identity():
    p = Pose6.from_transform(HomTransform(np.eye(3), np.zeros(3)))
    assert (p.x, p.y, p.z, p.rx, p.ry, p.rz) == (0, 0, 0, 0, 0, 0)


def test_pose_quarter_turn_about_z():
    T = HomTransform(euler_xyz_to_matrix(0, 0, math.pi / 2), np.zeros(3))
    p = Pose6.from_transform(T)
    assert (p.rx, p.ry) == (0.0, 0.0)
    assert p.rz == pytest.approx(90.0)


def test_pose_fields_round_trip_exactly():
    pose = Pose6(0.0, 0.0, 113.50, 180.0, 0.0, -90.0)
    row = pose.to_csv_row()
    vals = [float(v) for v in row.split(",")]
    assert vals == [0.0, 0.0, 113.50, 180.0, 0.0, -90.0]
    back = Pose6.from_transform(pose.to_transform())
    assert back.z == pytest.approx(113.50, abs=1e-12)
    assert abs(back.rx) == pytest.approx(180.0, abs=1e-9)
    assert back.ry == pytest.approx(0.0, abs=1e-9)
    assert back.rz == pytest.approx(-90.0, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.floats(-3.1, 3.1), st.floats(-1.4, 1.4), st.floats(-3.1, 3.1))
def test_euler_round_trip(rx, ry, rz):
    R = euler_xyz_to_matrix(rx, ry, rz)
    rx2, ry2, rz2 = matrix_to_euler_xyz(R)
    R2 = euler_xyz_to_matrix(rx2, ry2, rz2)
    np.testing.assert_allclose(R2, R, atol=1e-9)


def test_gimbal_lock_deterministic():
    R = euler_xyz_to_matrix(0.3, math.pi / 2, 0.5)
    rx, ry, rz = matrix_to_euler_xyz(R)
    assert rx == 0.0
    assert ry == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(euler_xyz_to_matrix(rx, ry, rz), R, atol=1e-9)


def test_rcm_pose_matches_manual_transform(psm):
    q = np.array([0.2, -0.3, 0.1, 0.4, -0.5, 0.2, -0.1])
    pose = rcm_pose(psm, q)
    fk = forward_kinematics(psm, q)
    T = HomTransform(psm.rcm_rotation, psm.rcm_origin).inverse().compose(fk["7"])
    np.testing.assert_allclose([pose.x, pose.y, pose.z], T.translation * 1000, atol=1e-9)


def test_com_affine_map(psm, rng):
    q = rng.uniform(-0.5, 0.5, 7)
    maps = com_positions_linear(psm, q)
    assert set(maps) == {"1", "2", "2''", "2''''", "3"}
    # placing the CoM at c must equal the FK of a frame shifted by c
    fk = forward_kinematics(psm, q)
    for fid, T in maps.items():
        c = rng.uniform(-0.1, 0.1, 3)
        p = T.rotation @ c + T.translation
        np.testing.assert_allclose(p, fk[fid].rotation @ c + fk[fid].translation, atol=1e-12)


def test_frame_motion_at_rest(psm):
    motion = frame_kinematics_derivatives(psm, RobotState(np.zeros(7)))
    for fm in motion.values():
        np.testing.assert_allclose(fm.omega, 0.0, atol=1e-15)
        np.testing.assert_allclose(fm.v, 0.0, atol=1e-15)
        np.testing.assert_allclose(fm.a, 0.0, atol=1e-15)
    biased = frame_kinematics_derivatives(psm, RobotState(np.zeros(7)), gravity_biased=True)
    np.testing.assert_allclose(biased["1"].a, -psm.gravity, atol=1e-15)


def test_parallelogram_relative_rates(psm):
    qd = np.zeros(7)
    qd[1] = 0.7
    st_ = RobotState(np.zeros(7), qd)
    motion = frame_kinematics_derivatives(psm, st_)
    fk = forward_kinematics(psm, np.zeros(7))
    parents = {"2": "1'", "2''": "2'", "2''''": "2'''"}
    signs = {"2": 1.0, "2''": -1.0, "2''''": 1.0}
    for fid, par in parents.items():
        rel = motion[fid].omega - motion[par].omega
        z = fk[fid].rotation[:, 2]
        assert rel @ z == pytest.approx(signs[fid] * 0.7, abs=1e-12)


def test_frame_velocities_match_finite_differences(psm, rng):
    h = 1e-6
    for _ in range(100):
        s = random_state(rng)
        motion = frame_kinematics_derivatives(psm, s)
        fk_p = forward_kinematics(psm, s.q + h * s.qd)
        fk_m = forward_kinematics(psm, s.q - h * s.qd)
        for fid, fm in motion.items():
            v_fd = (fk_p[fid].translation - fk_m[fid].translation) / (2 * h)
            scale = 1.0 + np.linalg.norm(fm.v)
            assert np.linalg.norm(fm.v - v_fd) / scale < 1e-6
            dR = (fk_p[fid].rotation - fk_m[fid].rotation) / (2 * h)
            S = dR @ fk_p[fid].rotation.T
            w_fd = np.array([S[2, 1], S[0, 2], S[1, 0]])
            scale = 1.0 + np.linalg.norm(fm.omega)
            assert np.linalg.norm(fm.omega - w_fd) / scale < 1e-6


def test_frame_accelerations_match_finite_differences(psm, rng):
    h = 1e-4
    for _ in range(20):
        s = random_state(rng)
        motion = frame_kinematics_derivatives(psm, s)
        qp = s.q + h * s.qd + 0.5 * h * h * s.qdd
        qm = s.q - h * s.qd + 0.5 * h * h * s.qdd
        fk_p = forward_kinematics(psm, qp)
        fk_0 = forward_kinematics(psm, s.q)
        fk_m = forward_kinematics(psm, qm)
        for fid, fm in motion.items():
            a_fd = (fk_p[fid].translation - 2 * fk_0[fid].translation
                    + fk_m[fid].translation) / h ** 2
            scale = 1.0 + np.linalg.norm(fm.a)
            assert np.linalg.norm(fm.a - a_fd) / scale < 1e-4


def test_rcm_pose_requires_reporting_frame(psm):
    from psmdyn.errors import ConfigError
    from psmdyn.model import model_from_dict, model_to_dict
    broken = model_from_dict(model_to_dict(psm))
    broken.rcm_frame = ""
    with pytest.raises(ConfigError):
        rcm_pose(broken, np.zeros(7))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_remote_center_for_any_closing_lengths(seed):
    # closure relations: l_2L2 = l_2H0 and l_2H1 = l_1H; the remote center
    # then sits at (0, l_1L + l_2L1, 0) for every configuration
    from psmdyn.model import build_psm_preset
    r = np.random.default_rng(seed)
    L = {k: float(v) for k, v in zip(EXAMPLE_LENGTHS, r.uniform(0.05, 0.6, 12))}
    L["l_2L2"] = L["l_2H0"]
    L["l_2H1"] = L["l_1H"]
    model = build_psm_preset(L)
    np.testing.assert_allclose(model.rcm_origin, [0.0, L["l_1L"] + L["l_2L1"], 0.0])
    for _ in range(5):
        q = r.uniform(-0.7, 0.7, 7)
        T3 = forward_kinematics(model, q)["3"]
        d = T3.rotation[:, 2]
        rvec = model.rcm_origin - T3.translation
        assert np.linalg.norm(rvec - d * (rvec @ d)) < 1e-9
