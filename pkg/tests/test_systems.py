import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from ctioc.errors import ConfigError, DivergenceError
from ctioc.systems import (DynamicalSystem, FunctionLaw, GainLaw, SinusoidSignal, SumLaw,
                           add_measurement_noise, builtin_basis, make_builtin_system,
                           make_linear_system, perturb_input_dynamics, read_trajectory_csv,
                           simulate, write_trajectory_csv)

from conftest import K_EXAMPLE1


def test_example1_input_map_at_origin():
    g = make_builtin_system("example1").g([0.0, 0.0])
    np.testing.assert_allclose(g[:, 0], [0.0, 3.0])


def test_linear2d_drift():
    np.testing.assert_allclose(make_builtin_system("linear2d").f([1.0, 1.0]), [1.0, -2.0])


def test_quadrotor_drift_vanishes_at_zero_rates():
    f = make_builtin_system("quadrotor_rot").f([0.3, -0.2, 0.1, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(f, np.zeros(6))


def test_quadrotor_inertias():
    sys = make_builtin_system("quadrotor_rot")
    assert sys.params == {"Ixx": 4.856e-3, "Iyy": 4.856e-3, "Izz": 8.801e-3}
    np.testing.assert_allclose(np.diag(sys.g(np.zeros(6))[3:]), [1 / 4.856e-3, 1 / 4.856e-3,
                                                                  1 / 8.801e-3])


def test_unknown_system_and_bad_inertia():
    with pytest.raises(ConfigError):
        make_builtin_system("pendulum")
    with pytest.raises(ConfigError):
        make_builtin_system("quadrotor_rot", {"Ixx": -1.0})


@pytest.mark.parametrize("name", ["example1", "quadrotor_rot", "linear2d"])
def test_parametric_input_map_reconstructs_g(name):
    sys = make_builtin_system(name)
    X = builtin_basis(name).sample(1000, seed=3)
    gT = np.swapaxes(sys.g(X), -1, -2)
    rec = np.einsum("ml,...ln->...mn", sys.W_g, sys.sigma_g(X))
    assert np.abs(gT - rec).max() <= 1e-8


def test_zero_vector_field_keeps_state():
    sys = DynamicalSystem("zero", 2, 1, lambda x: np.zeros_like(x),
                          lambda x: np.zeros(x.shape + (1,)), np.full(2, -3.0), np.full(2, 3.0))
    traj = simulate(sys, FunctionLaw(lambda t, x: np.ones(1)), [2.0, 2.0], 1e-3, 0.5)
    np.testing.assert_array_equal(traj.states, np.full_like(traj.states, 2.0))


def test_linear2d_matches_matrix_exponential():
    sys = make_builtin_system("linear2d")
    x0 = np.array([-0.5, 0.5])
    traj = simulate(sys, FunctionLaw(lambda t, x: np.zeros(1)), x0, 1e-3, 1.0)
    exact = scipy.linalg.expm(np.diag([1.0, -2.0])) @ x0
    np.testing.assert_allclose(traj.states[-1], exact, atol=1e-8)
    assert traj.times[-1] == pytest.approx(1.0)


def test_example1_optimal_law_regulates(ex1):
    _, _, traj = ex1
    assert np.linalg.norm(traj.states[-1]) < 1e-3


def test_example1_step_size_oracle(ex1):
    sys, basis, traj = ex1
    fine = simulate(sys, GainLaw(K_EXAMPLE1, basis.sigma_u), [2.0, 2.0], 1e-4, 1.0)
    np.testing.assert_allclose(traj.states[1000], fine.states[-1], atol=1e-10)


def test_rk4_order_on_linear2d():
    sys = make_builtin_system("linear2d")
    law = GainLaw(np.array([[0.5, 0.0]]), builtin_basis("linear2d").sigma_u)
    x0, T, dt = [-0.5, 0.5], 1.0, 0.04

    def end(h):
        return simulate(sys, law, x0, h, T).states[-1]

    ref = end(dt / 8)
    ratio = np.linalg.norm(end(dt) - ref) / np.linalg.norm(end(dt / 2) - ref)
    assert ratio >= 12


def test_gain_law_inputs_are_exact(ex1):
    _, basis, traj = ex1
    np.testing.assert_array_equal(traj.inputs, -(basis.sigma_u(traj.states) @ K_EXAMPLE1.T))


def test_trajectory_time_grid(ex1):
    traj = ex1[2]
    np.testing.assert_allclose(np.diff(traj.times), traj.dt, rtol=0, atol=1e-12)
    assert len(traj.states) == len(traj.inputs) >= 2


def test_divergence_is_reported():
    sys = make_linear_system([[1.0]], [[1.0]])
    with pytest.raises(DivergenceError) as info:
        simulate(sys, FunctionLaw(lambda t, x: np.zeros(1)), [1.0], 1e-2, 30.0)
    assert info.value.trajectory is not None


def test_noise_zero_pct_is_identity(ex1):
    traj = ex1[2]
    out = add_measurement_noise(traj, 0.0, seed=1)
    np.testing.assert_array_equal(out.states, traj.states)
    np.testing.assert_array_equal(out.inputs, traj.inputs)


def test_noise_is_reproducible_and_bounded(ex1):
    traj = ex1[2]
    before = traj.states.copy()
    a = add_measurement_noise(traj, 0.03, seed=7)
    b = add_measurement_noise(traj, 0.03, seed=7)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert np.all(np.abs(a.states - traj.states) <= 0.03 * np.abs(traj.states))
    assert np.all(np.abs(a.inputs - traj.inputs) <= 0.03 * np.abs(traj.inputs))
    np.testing.assert_array_equal(traj.states, before)


def test_noise_rejects_bad_pct(ex1):
    with pytest.raises(ValueError):
        add_measurement_noise(ex1[2], 1.5, seed=0)


def test_perturb_input_dynamics():
    lin = make_builtin_system("linear2d")
    np.testing.assert_array_equal(perturb_input_dynamics(lin, 0.0).g([0.3, 0.1]), lin.g([0.3, 0.1]))
    np.testing.assert_allclose(perturb_input_dynamics(lin, 0.1).g([0.0, 0.0])[:, 0], [1.1, 1.1])
    np.testing.assert_allclose(perturb_input_dynamics(lin, 0.1).W_g, [[1.1, 1.1]])
    ex = perturb_input_dynamics(make_builtin_system("example1"), 0.05)
    np.testing.assert_allclose(ex.g([0.0, 0.0])[:, 0], [0.0, 3.15])
    np.testing.assert_array_equal(ex.f([0.4, 0.2]), make_builtin_system("example1").f([0.4, 0.2]))


def test_sum_law_adds_enrichment():
    basis = builtin_basis("linear2d")
    sig = SinusoidSignal.random(1, 3, 0.2, 8.0, 0.5, seed=2)
    law = SumLaw(GainLaw(np.array([[1.0, 2.0]]), basis.sigma_u), sig)
    x = np.array([0.1, 0.2])
    np.testing.assert_allclose(law(0.3, x), -0.5 + sig(0.3))
    assert np.all(np.abs([sig(t) for t in np.linspace(0, 5, 200)]) <= sig.bound + 1e-12)


def test_trajectory_csv_round_trip(tmp_path, ex1):
    traj = ex1[2]
    p = tmp_path / "traj.csv"
    write_trajectory_csv(traj, p)
    text = p.read_bytes()
    assert text.startswith(b"t,x1,x2,u1\n") and b"\r" not in text
    back = read_trajectory_csv(p)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.inputs, traj.inputs)
    np.testing.assert_array_equal(back.times, traj.times)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_noise_bound_property(pct, seed):
    sys = make_builtin_system("linear2d")
    traj = simulate(sys, GainLaw(np.array([[2.5, 0.0]]), builtin_basis("linear2d").sigma_u),
                    [-0.5, 0.5], 1e-2, 0.5)
    out = add_measurement_noise(traj, pct, seed)
    assert np.all(np.abs(out.states - traj.states) <= pct * np.abs(traj.states) + 1e-15)
