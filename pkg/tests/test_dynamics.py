import json
import math

import numpy as np
import pytest

from psmdyn.dynamics import (
    ParamVector, base_parameter_analysis, column_names, gravity_torque,
    inverse_dynamics, kinetic_potential_energy, lagrangian_oracle, load_params,
    mass_and_bias, regressor, save_params,
    synthesize_full_params, _potential_el, _DeltaStruct,
)
from psmdyn.errors import ContractError
from psmdyn.kinematics import RobotState
from psmdyn.model import param_layout

from conftest import feasible_delta, pendulum_delta, pendulum_model, random_state


def test_regressor_has_64_columns(psm, rng):
    s = random_state(rng)
    block = regressor(psm, s)
    assert block.H.shape == (7, 64)
    names = column_names(param_layout(psm))
    assert len(names) == 64
    assert names[0] == "1.inertial.m"
    assert names[-1] == "F67.friction.Fo"


def test_viscous_columns_vanish_at_rest(psm, layout, rng):
    q = random_state(rng).q
    block = regressor(psm, RobotState(q))
    fv = layout.mask("friction", ("Fv",))
    np.testing.assert_allclose(block.H[:, fv], 0.0, atol=1e-15)
    fc = layout.mask("friction", ("Fc",))
    np.testing.assert_allclose(block.H[:, fc], 0.0, atol=1e-15)
    fo = layout.mask("friction", ("Fo",))
    assert np.abs(block.H[:, fo]).max() > 0  # offsets stay


def test_rest_regressor_carries_only_gravity_and_stiffness_and_offsets(psm, layout, rng):
    q = random_state(rng).q
    H = regressor(psm, RobotState(q)).H
    motor = layout.mask("motor")
    np.testing.assert_allclose(H[:, motor], 0.0, atol=1e-15)
    ks = layout.mask("stiffness")
    assert np.abs(H[:, ks]).max() > 0
    inert = layout.mask("inertial")
    assert np.abs(H[:, inert]).max() > 0


def test_linearity_inverse_dynamics_vs_regressor(psm, layout, rng):
    for _ in range(100):
        s = random_state(rng)
        d = ParamVector(layout, rng.uniform(-1.0, 1.0, layout.dim))
        tau = inverse_dynamics(psm, s, d)
        tau_h = regressor(psm, s).H @ d.values
        assert np.abs(tau - tau_h).max() <= 1e-9 * (1.0 + np.abs(tau).max())


def test_regressor_columns_equal_unit_vector_dynamics(psm, layout, rng):
    s = random_state(rng)
    H = regressor(psm, s).H
    for j in rng.choice(layout.dim, size=10, replace=False):
        ej = np.zeros(layout.dim)
        ej[j] = 1.0
        tau_j = inverse_dynamics(psm, s, ParamVector(layout, ej))
        np.testing.assert_allclose(H[:, j], tau_j, atol=1e-12)


def test_pendulum_gravity_is_analytic():
    m, ell, g = 2.0, 0.3, 9.81
    model = pendulum_model()
    delta = pendulum_delta(model, m, ell)
    for q1 in (-1.2, -0.4, 0.0, 0.7, 1.5):
        q = np.zeros(7)
        q[0] = q1
        G = gravity_torque(model, q, delta)
        assert G[0] == pytest.approx(-m * g * ell * math.sin(q1), abs=1e-12)
        np.testing.assert_allclose(G[1:], 0.0, atol=1e-15)
        tau = inverse_dynamics(model, RobotState(q), delta)
        assert tau[0] == pytest.approx(G[0], abs=1e-12)


def test_zero_gravity_means_zero_gravity_torque(psm, layout, rng):
    from psmdyn.model import build_psm_preset
    from conftest import EXAMPLE_LENGTHS
    model = build_psm_preset(EXAMPLE_LENGTHS, gravity=(0.0, 0.0, 0.0))
    d = feasible_delta(model, rng)
    for _ in range(5):
        q = random_state(rng).q
        np.testing.assert_allclose(gravity_torque(model, q, d), 0.0, atol=1e-15)


def test_gravity_matches_potential_gradient(psm, layout, rng):
    d = ParamVector(layout, rng.uniform(-1.0, 1.0, layout.dim))
    struct = _DeltaStruct(psm, d)
    h = 1e-6
    for _ in range(20):
        q = random_state(rng).q
        G = gravity_torque(psm, q, d, include_stiffness=True)
        fd = np.zeros(7)
        for k in range(7):
            e = np.zeros(7)
            e[k] = h
            fd[k] = (_potential_el(psm, q + e, struct)
                     - _potential_el(psm, q - e, struct)) / (2 * h)
        assert np.abs(G - fd).max() < 1e-5 * max(1.0, np.abs(G).max())


def test_stiffness_flag_toggles_spring_term(psm, layout, rng):
    d = feasible_delta(psm, rng, ks=0.5)
    q = random_state(rng).q
    g0 = gravity_torque(psm, q, d, include_stiffness=False)
    g1 = gravity_torque(psm, q, d, include_stiffness=True)
    expected = np.zeros(7)
    expected[3] = 0.5 * (q[3] - psm.spring_rest)
    np.testing.assert_allclose(g1 - g0, expected, atol=1e-12)


def test_oracle_agrees_with_inverse_dynamics(psm, layout, rng):
    for _ in range(25):
        s = random_state(rng)
        d = ParamVector(layout, rng.uniform(-1.0, 1.0, layout.dim))
        tau = inverse_dynamics(psm, s, d)
        tau_el = lagrangian_oracle(psm, s, d)
        assert np.abs(tau - tau_el).max() <= 1e-5 * (1.0 + np.abs(tau).max())


def test_oracle_agrees_in_full_mode(psm, rng):
    lay = param_layout(psm, "full")
    for _ in range(5):
        s = random_state(rng)
        d = ParamVector(lay, rng.uniform(-0.5, 0.5, lay.dim))
        tau = inverse_dynamics(psm, s, d)
        tau_el = lagrangian_oracle(psm, s, d)
        assert np.abs(tau - tau_el).max() <= 1e-5 * (1.0 + np.abs(tau).max())


def test_zero_parameters_zero_torque(psm, layout):
    s = RobotState(np.ones(7) * 0.3, np.ones(7), np.ones(7))
    d = ParamVector(layout, np.zeros(layout.dim))
    np.testing.assert_allclose(inverse_dynamics(psm, s, d), 0.0, atol=1e-15)
    np.testing.assert_allclose(lagrangian_oracle(psm, s, d), 0.0, atol=1e-12)


def test_power_balance_along_trajectory(psm, rng):
    # frictionless parameters: d(T+V)/dt must equal qd . tau
    lay = param_layout(psm)
    d = feasible_delta(psm, rng)
    vals = d.values.copy()
    vals[lay.mask("friction")] = 0.0
    d = ParamVector(lay, vals)
    w = 2 * math.pi * 0.25
    amp = np.array([0.3, 0.25, 0.05, 0.5, 0.4, 0.3, 0.3])
    off = np.array([0.0, 0.0, 0.12, 0.0, 0.0, 0.0, 0.0])

    def state(t):
        return RobotState(off + amp * np.sin(w * t),
                          amp * w * np.cos(w * t),
                          -amp * w * w * np.sin(w * t))

    h = 1e-5
    for t in np.linspace(0.3, 3.5, 7):
        s = state(t)
        tau = inverse_dynamics(psm, s, d)
        Ep = sum(kinetic_potential_energy(psm, state(t + h), d))
        Em = sum(kinetic_potential_energy(psm, state(t - h), d))
        dE = (Ep - Em) / (2 * h)
        power = s.qd @ tau
        assert dE == pytest.approx(power, rel=1e-4, abs=1e-6)


def test_mass_and_bias_reproduce_inverse_dynamics(psm, rng):
    lay = param_layout(psm, "full")
    d = feasible_delta(psm, rng, mode="full")
    s = random_state(rng)
    M, bias = mass_and_bias(psm, s.q, s.qd, d)
    tau_rb = M @ s.qdd + bias
    # compare against inverse dynamics with friction/stiffness removed
    vals = d.values.copy()
    vals[lay.mask("friction")] = 0.0
    vals[lay.mask("stiffness")] = 0.0
    tau_id = inverse_dynamics(psm, s, ParamVector(lay, vals))
    np.testing.assert_allclose(tau_rb, tau_id, atol=1e-9)
    np.testing.assert_allclose(M, M.T, atol=1e-9)


def test_synthesized_full_params_match_gravity(psm, rng):
    d = feasible_delta(psm, rng)
    full = synthesize_full_params(psm, d)
    assert full.layout.mode == "full"
    q = random_state(rng).q
    np.testing.assert_allclose(gravity_torque(psm, q, d),
                               gravity_torque(psm, q, full), atol=1e-12)


def test_layout_mismatch_raises(psm, rng):
    model2 = pendulum_model()
    d = pendulum_delta(model2)
    with pytest.raises(ContractError):
        inverse_dynamics(psm, random_state(rng), d)


def test_identifiable_subspace_of_single_link():
    # mass on the joint axis: only the two in-plane first moments are
    # identifiable; the mass and the axial moment are not
    model = pendulum_model(Fc=1.0)
    lay = param_layout(model)
    rng = np.random.default_rng(0)
    states = [RobotState(rng.uniform(-1, 1, 7), rng.uniform(-1, 1, 7),
                         rng.uniform(-1, 1, 7)) for _ in range(2 * lay.dim)]
    rep = base_parameter_analysis(model, states)
    inertial_rank = 2
    friction_rank = 3
    assert rep.rank == inertial_rank + friction_rank
    # unidentifiable directions include pure mass and pure axial moment
    for name in ("m", "mcz"):
        ej = np.zeros(lay.dim)
        ej[lay.index("1", name)] = 1.0
        proj = rep.basis.T @ ej
        assert np.linalg.norm(proj) < 1e-8


def test_duplicate_states_do_not_change_rank(psm, layout, rng):
    states = [random_state(rng) for _ in range(2 * layout.dim)]
    rep1 = base_parameter_analysis(psm, states)
    rep2 = base_parameter_analysis(psm, states + states[:40])
    assert rep1.rank == rep2.rank


def test_psm_has_structural_rank_deficiency(psm, layout, rng):
    states = [random_state(rng) for _ in range(2 * layout.dim)]
    rep = base_parameter_analysis(psm, states)
    assert rep.rank < layout.dim
    assert rep.basis.shape == (layout.dim, rep.rank)
    # basis is orthonormal
    np.testing.assert_allclose(rep.basis.T @ rep.basis, np.eye(rep.rank), atol=1e-10)


def test_too_few_samples_rejected(psm, layout, rng):
    states = [random_state(rng) for _ in range(10)]
    with pytest.raises(ContractError):
        base_parameter_analysis(psm, states)


def test_param_file_round_trip(psm, layout, rng, tmp_path):
    d = feasible_delta(psm, rng)
    path = tmp_path / "params.json"
    save_params(psm, d, path)
    back = load_params(psm, path)
    np.testing.assert_array_equal(back.values, d.values)
    assert back.layout.entries == d.layout.entries
    data = json.loads(path.read_text())
    units = {e["name"]: e["unit"] for e in data["entries"] if e["frame"] == "3"}
    assert units["m"] == "kg"
    assert units["Fc"] == "N"


def test_param_file_missing_entry_rejected(psm, layout, rng, tmp_path):
    d = feasible_delta(psm, rng)
    path = tmp_path / "params.json"
    save_params(psm, d, path)
    data = json.loads(path.read_text())
    data["entries"] = data["entries"][:-1]
    path.write_text(json.dumps(data))
    with pytest.raises(ContractError, match="missing"):
        load_params(psm, path)


def test_regressor_dump_csv(psm, layout, rng, tmp_path):
    from psmdyn.dynamics import dump_regressor_csv, regressor
    s = random_state(rng)
    block = regressor(psm, s)
    path = tmp_path / "H.csv"
    dump_regressor_csv(block, layout, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[0] == "1.inertial.m"
    assert len(lines) == 8
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    np.testing.assert_array_equal(body, block.H)
