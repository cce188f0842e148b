import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psmdyn.errors import ConfigError
from psmdyn.kinematics import forward_kinematics
from psmdyn.model import (
    build_psm_preset, coupling_matrix, default_hulls, load_model,
    load_model_config, model_from_dict, model_to_dict, param_layout,
    save_model, validate,
)

from conftest import EXAMPLE_LENGTHS


def e(j):
    v = np.zeros(7)
    v[j] = 1.0
    return v


def test_preset_has_sixteen_rows(psm):
    assert len(psm.frames) == 16
    assert [f.id for f in psm.frames] == [
        "1", "1'", "2", "2'", "2''", "2'''", "2''''", "3", "3'", "4", "5",
        "6", "7", "M6", "M7", "F67",
    ]


def test_counter_rotating_pitch_frame(psm):
    f = psm.frame("2''")
    assert f.ref == "2'"
    assert f.a_prev == 0.0
    assert f.alpha_prev == pytest.approx(-math.pi / 2)
    assert f.theta_const == pytest.approx(math.pi / 2)
    np.testing.assert_array_equal(f.coupling_row, -e(1))
    assert f.joint_kind == "revolute"
    assert f.has_link_inertia and f.has_friction
    assert not f.has_motor_inertia and not f.has_stiffness


def test_half_rate_carriage_frame(psm):
    f = psm.frame("3'")
    assert f.ref == "3"
    assert f.a_prev == pytest.approx(-EXAMPLE_LENGTHS["l_3L"])
    assert f.joint_kind == "prismatic"
    assert f.d_const == pytest.approx(EXAMPLE_LENGTHS["l_3H"])
    np.testing.assert_array_equal(f.coupling_row, -0.5 * e(2))
    assert f.has_friction
    assert not (f.has_link_inertia or f.has_motor_inertia or f.has_stiffness)


def test_insertion_offset_is_l2H1_minus_lRCC(psm):
    f = psm.frame("3")
    assert f.d_const == pytest.approx(EXAMPLE_LENGTHS["l_2H1"] - EXAMPLE_LENGTHS["l_RCC"])


def test_flag_counts(psm):
    dL = [f.id for f in psm.frames if f.has_link_inertia]
    Fr = [f.id for f in psm.frames if f.has_friction]
    Im = [f.id for f in psm.frames if f.has_motor_inertia]
    Ks = [f.id for f in psm.frames if f.has_stiffness]
    assert dL == ["1", "2", "2''", "2''''", "3"]
    assert len(Fr) == 13 and "3'" in Fr and "F67" in Fr
    assert Im == ["4", "5", "M6", "M7"]
    assert Ks == ["4"]


def test_degenerate_zero_lengths():
    zero = {k: 0.0 for k in EXAMPLE_LENGTHS}
    model = build_psm_preset(zero)
    fk = forward_kinematics(model, np.zeros(7))
    for f in model.frames:
        if f.is_spatial:
            np.testing.assert_allclose(fk[f.id].translation, 0.0, atol=1e-15)


def test_missing_length_key_named():
    lengths = dict(EXAMPLE_LENGTHS)
    del lengths["l_2H0"]
    with pytest.raises(ConfigError, match="l_2H0"):
        build_psm_preset(lengths)


def test_validate_clean(psm):
    assert validate(psm) == []


def test_validate_detects_cycle(psm):
    model = model_from_dict(model_to_dict(psm))
    model.frame("5").ref = "6"
    msgs = validate(model)
    assert any("5" in m and ("cycle" in m or "reach" in m) for m in msgs)


def test_validate_hull_flag_mismatch(psm):
    model = model_from_dict(model_to_dict(psm))
    model.frame("2").hull_vertices = np.zeros((0, 3))
    msgs = validate(model)
    assert any(m.startswith("2:") and "hull" in m for m in msgs)


def test_validate_fixed_frame_coupling(psm):
    model = model_from_dict(model_to_dict(psm))
    model.frame("2'").coupling_row = e(1)
    assert any("2':" in m for m in validate(model))


def test_validate_motor_coupling_columns(psm):
    model = model_from_dict(model_to_dict(psm))
    model.motor_coupling = np.zeros((2, 7))
    model.motor_coupling[0, 0] = 1.0
    assert any("motor_coupling" in m for m in validate(model))


def test_validate_gravity_bound(psm):
    model = model_from_dict(model_to_dict(psm))
    model.gravity = np.array([0.0, 0.0, -50.0])
    assert any("gravity" in m for m in validate(model))


def test_coupling_matrix_rows(psm):
    C = coupling_matrix(psm)
    idx = {f.id: i for i, f in enumerate(psm.frames)}
    np.testing.assert_array_equal(C[idx["2''''"]], e(1))
    np.testing.assert_array_equal(C[idx["F67"]], e(6) - e(5))
    for fid in ("1'", "2'", "2'''"):
        np.testing.assert_array_equal(C[idx[fid]], np.zeros(7))


def test_coupling_pattern(psm):
    C = coupling_matrix(psm)
    idx = {f.id: i for i, f in enumerate(psm.frames)}
    expected = {
        "1": [0], "2": [1], "2''": [1], "2''''": [1], "3": [2], "3'": [2],
        "4": [3], "5": [4], "6": [5], "7": [6], "F67": [5, 6],
        "M6": [5], "M7": [6],
        "1'": [], "2'": [], "2'''": [],
    }
    for fid, cols in expected.items():
        assert sorted(np.nonzero(C[idx[fid]])[0].tolist()) == cols, fid


def test_roundtrip_serialization(psm, tmp_path):
    path = tmp_path / "model.json"
    save_model(psm, path)
    back = load_model(path)
    assert model_to_dict(back) == model_to_dict(psm)


def test_config_load_converts_mm(tmp_path):
    cfg = {
        "lengths": {k: v * 1000.0 for k, v in EXAMPLE_LENGTHS.items()},
        "gravity": [0.0, 0.0, -9.81],
        "spring_rest_deg": 90.0,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    model = load_model_config(path)
    assert model.lengths["l_2H0"] == pytest.approx(EXAMPLE_LENGTHS["l_2H0"])
    assert model.spring_rest == pytest.approx(math.pi / 2)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lengths": {}, "extra_key": 1}))
    with pytest.raises(ConfigError, match="extra_key"):
        load_model_config(path)


def test_layout_dimension_gravity(psm, layout):
    assert layout.dim == 64
    groups = [e.group for e in layout.entries]
    assert groups.count("inertial") == 20
    assert groups.count("friction") == 39
    assert groups.count("motor") == 4
    assert groups.count("stiffness") == 1


def test_layout_dimension_full(psm):
    assert param_layout(psm, "full").dim == 5 * 10 + 13 * 3 + 4 + 1


def test_default_hulls_cover_inertial_frames(psm):
    hulls = default_hulls(EXAMPLE_LENGTHS)
    assert set(hulls) == {"1", "2", "2''", "2''''", "3"}
    for V in hulls.values():
        assert V.shape == (8, 3)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(min_value=1e-3, max_value=2.0), min_size=12, max_size=12))
def test_any_positive_lengths_validate(lens):
    lengths = dict(zip(EXAMPLE_LENGTHS.keys(), lens))
    assert validate(build_psm_preset(lengths)) == []


def test_custom_motor_coupling_flows_into_lumped_rows():
    mc = np.zeros((2, 7))
    mc[0, 5], mc[0, 6] = 1.0, 0.4
    mc[1, 5], mc[1, 6] = -0.4, 1.0
    model = build_psm_preset(EXAMPLE_LENGTHS, motor_coupling=mc)
    assert validate(model) == []
    np.testing.assert_array_equal(model.frame("M6").coupling_row, mc[0])
    np.testing.assert_array_equal(model.frame("M7").coupling_row, mc[1])


def test_left_handed_model_mirrors_base():
    model = build_psm_preset(EXAMPLE_LENGTHS, handedness="left")
    assert validate(model) == []
    fk = forward_kinematics(model, np.zeros(7))
    right = forward_kinematics(build_psm_preset(EXAMPLE_LENGTHS), np.zeros(7))
    S = np.diag([1.0, -1.0, 1.0])
    for fid in ("1", "3", "7"):
        assert np.linalg.det(fk[fid].rotation) == pytest.approx(-1.0)
        np.testing.assert_allclose(fk[fid].translation,
                                   S @ right[fid].translation, atol=1e-12)


def test_config_hull_override(tmp_path):
    cfg = {
        "lengths": {k: v * 1000.0 for k, v in EXAMPLE_LENGTHS.items()},
        "hulls": {"1": [[100, 0, 0], [-100, 0, 0], [0, 100, 0],
                        [0, -100, 0], [0, 0, 100], [0, 0, -100]]},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    model = load_model_config(path)
    V = model.frame("1").hull_vertices
    assert V.shape == (6, 3)
    assert np.abs(V).max() == pytest.approx(0.1)  # mm converted to m
    # frames without an override keep the default box
    assert model.frame("2").hull_vertices.shape == (8, 3)
