import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gridkal.discretization import (
    DescriptorSystem,
    MeshSpec,
    assemble_linear,
    linearize_friction,
    stationary_solve,
)
from gridkal.network import builtin_diamond, set_linear_friction
from gridkal.simulation import (
    BoundarySignal,
    MEASUREMENT_STD_FLOOR,
    Segment,
    SimulationError,
    Trajectory,
    boundary_inputs,
    kirchhoff_residual,
    simulate_linear,
    simulate_nonlinear,
    simulate_ou,
    synthesize_measurements,
    theta_inputs,
)

from conftest import single_pipe, two_pipe


def dense_system(E, A, B=None):
    E, A = np.atleast_2d(E).astype(float), np.atleast_2d(A).astype(float)
    n = E.shape[0]
    B = np.zeros((n, 0)) if B is None else np.atleast_2d(B)
    return DescriptorSystem(E, A, B, np.zeros((0, n)), np.arange(n), np.arange(0), np.arange(0),
                            (), (), np.eye(n))


def test_ou_one_step_by_hand():
    path = simulate_ou(1.0, 0.0, 0.0, 1.0, 1.0, 1, seed=0)
    assert path[1] == 0.5


def test_ou_fixed_point():
    path = simulate_ou(3.0, 2.0, 0.0, 2.0, 0.02, 50, seed=0)
    np.testing.assert_allclose(path, 2.0, rtol=0, atol=1e-15)


def test_ou_seed_determinism_and_streams():
    a = simulate_ou(3, 0, 0.2, 0, 0.02, 100, seed=7, stream="v1")
    b = simulate_ou(3, 0, 0.2, 0, 0.02, 100, seed=7, stream="v1")
    c = simulate_ou(3, 0, 0.2, 0, 0.02, 100, seed=7, stream="v2")
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(-1.0, 1.0), st.floats(0.05, 0.5), st.integers(0, 1000))
def test_ou_stationary_moments(kappa, mu, sigma, seed):
    tau, K = 0.01, 100_000
    path = simulate_ou(kappa, mu, sigma, mu, tau, K, seed)[1:]
    # exact stationary law of the drift-implicit recursion
    a = 1.0 / (1.0 + tau * kappa)
    var = a * a * sigma ** 2 * tau / (1 - a * a)
    # effective sample size from the lag-one autocorrelation a
    n_eff = K * (1 - a) / (1 + a)
    assert abs(path.mean() - mu) <= 4 * math.sqrt(var / n_eff)
    assert abs(path.var() / var - 1) <= 4 * math.sqrt(2 / n_eff)


def test_segments_and_checks():
    sig = BoundarySignal("v1", (Segment("linear", 0, 1, v0=2, v1=3), Segment("constant", 1, 5, value=3),
                                Segment("sin", 5, 6, A=1, B=2, omega=math.pi),
                                Segment("cos", 6, 7, A=1, B=1, omega=0.0)))
    np.testing.assert_allclose(sig.deterministic([0, 0.5, 1, 4.9, 5.5, 7]), [2, 2.5, 3, 3, 1 + 2 * math.sin(5.5 * math.pi), 2])
    sig.check(7)
    with pytest.raises(SimulationError, match="before T"):
        sig.check(8)
    gap = BoundarySignal("v1", (Segment("constant", 0, 1, value=1), Segment("constant", 2, 3, value=1)))
    with pytest.raises(SimulationError, match="gap"):
        gap.check(3)
    with pytest.raises(SimulationError, match="kappa"):
        BoundarySignal.constant("v1", 1.0, 1.0, kappa=-1).check(1.0)


def test_theta_inputs():
    uD = np.array([[0.0], [1.0], [3.0]])
    uS = np.array([[10.0], [20.0], [30.0]])
    np.testing.assert_allclose(theta_inputs(uD, uS, 0.75), [[0.75 + 10], [2.5 + 20]])


def test_boundary_inputs_require_every_node():
    with pytest.raises(SimulationError, match="v2"):
        boundary_inputs([BoundarySignal.constant("v1", 1, 1)], ("v1", "v2"), 0.1, 10, 0)


def test_linear_scalar_theta_factor():
    traj = simulate_linear(dense_system(1.0, -1.0), [], np.array([1.0]), 0.02, 0.51, 3)
    factor = (1 - 0.02 * 0.49) / (1 + 0.02 * 0.51)
    np.testing.assert_allclose(traj.states[:, 0], factor ** np.arange(4), rtol=1e-14)
    assert abs(factor - 0.98020) < 1e-5


def test_linear_constant_for_trivial_system():
    traj = simulate_linear(dense_system(np.eye(3), np.zeros((3, 3))), [], np.array([1.0, -2.0, 3.0]), 0.1, 0.5, 10)
    assert np.all(traj.states == traj.states[0])


def test_theta_range():
    with pytest.raises(SimulationError, match="theta"):
        simulate_linear(dense_system(1.0, -1.0), [], np.array([1.0]), 0.02, 0.3, 3)


def test_linear_zero_input_energy_decay():
    net = builtin_diamond()
    mesh = MeshSpec(20)
    stat = stationary_solve(net, {"v1": 3.0, "v2": 2.0}, mesh)
    sys = assemble_linear(linearize_friction(net, stat), mesh)
    sigs = [BoundarySignal.constant(v, 0.0, 20.0) for v in sys.boundary]
    traj = simulate_linear(sys, sigs, stat.vector, 0.02, 0.51, 1000)
    energy = 0.5 * np.einsum("ij,ij->i", traj.states, (sys.E @ traj.states.T).T)
    assert np.all(np.diff(energy) <= 1e-12 * energy[0])
    assert energy[-1] < energy[0]


def test_nonlinear_steady_state_is_fixed_point():
    net = builtin_diamond()
    mesh = MeshSpec(8)
    stat = stationary_solve(net, {"v1": 3.0, "v2": 2.0}, mesh)
    sigs = [BoundarySignal.constant("v1", 3.0, 1.0), BoundarySignal.constant("v2", 2.0, 1.0)]
    traj = simulate_nonlinear(net, mesh, sigs, stat, 0.02, 0.51, 50)
    drift = np.max(np.abs(traj.states - traj.states[0]), axis=1) / np.max(np.abs(traj.states[0]))
    assert np.max(drift) <= 1e-9


def test_nonlinear_equals_linear_without_friction():
    net = single_pipe(d=0.0)
    mesh = MeshSpec(10)
    stat = stationary_solve(net, {"v1": 2.0, "v2": 2.0}, mesh)
    sigs = [BoundarySignal("v1", (Segment("linear", 0, 1, v0=2, v1=2.5),), kappa=3, sigma=0.2),
            BoundarySignal.constant("v2", 2.0, 1.0)]
    nl = simulate_nonlinear(net, mesh, sigs, stat, 0.01, 0.55, 100, seed=4)
    lin = simulate_linear(assemble_linear(set_linear_friction(net, {"e1": 0.0}), mesh), sigs, stat.vector,
                          0.01, 0.55, 100, seed=4)
    assert np.max(np.abs(nl.states - lin.states)) <= 1e-9 * np.max(np.abs(lin.states))
    assert np.array_equal(nl.noise, lin.noise)


def test_kirchhoff_holds_every_step():
    net = two_pipe(d=1.0)
    mesh = MeshSpec(6)
    stat = stationary_solve(net, {"v1": 2.0, "v3": 1.5}, mesh)
    sigs = [BoundarySignal("v1", (Segment("linear", 0, 2, v0=2, v1=2.4),), kappa=3, sigma=0.2),
            BoundarySignal.constant("v3", 1.5, 2.0)]
    nl = simulate_nonlinear(net, mesh, sigs, stat, 0.02, 0.51, 100, seed=1)
    sys = assemble_linear(linearize_friction(net, stat), mesh)
    lin = simulate_linear(sys, sigs, stat.vector, 0.02, 0.51, 100, seed=1)
    assert max(kirchhoff_residual(sys, x) for x in nl.states) <= 1e-9
    assert max(kirchhoff_residual(sys, x) for x in lin.states) <= 1e-9


def _fake_truth(values):
    """Single pipe, one element: the v1 output is the first flux dof."""
    K = len(values)
    states = np.zeros((K + 1, 3))
    states[1:, 1] = values
    return Trajectory(np.arange(K + 1.0), states, np.zeros((K + 1, 2)), ("v1", "v2"), "nonlinear")


def test_measurement_std_rule():
    truth = _fake_truth(np.linspace(-50, 20, 30))
    ms = synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1"], 0.01, seed=3)
    assert ms.R.shape == (1, 1) and ms.R[0, 0] == pytest.approx(0.25)
    again = synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1"], 0.01, seed=3)
    assert np.array_equal(ms.y, again.y)


def test_measurement_without_noise_is_exact():
    truth = _fake_truth(np.linspace(1, 2, 5))
    ms = synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1"], 0.0, seed=3)
    np.testing.assert_array_equal(ms.y[:, 0], np.linspace(1, 2, 5))
    assert ms.degenerate == ["v1"]


def test_measurement_floor_for_silent_channel():
    truth = _fake_truth(np.zeros(5))
    ms = synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1"], 0.01, seed=3)
    assert ms.R[0, 0] == MEASUREMENT_STD_FLOOR ** 2


def test_measurement_fixed_std():
    truth = _fake_truth(np.linspace(1, 2, 5))
    ms = synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1", "v2"], 0.01, seed=3,
                                 std=np.array([0.5, 0.25]))
    np.testing.assert_allclose(np.diag(ms.R), [0.25, 0.0625])
    with pytest.raises(SimulationError):
        synthesize_measurements(truth, single_pipe(), MeshSpec(1), ["v1"], 0.01, seed=3, std=np.ones(2))
